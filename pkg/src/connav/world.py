"""2D geometry, raycast LiDAR and randomized scenario generation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from connav.connectivity import adjacency, is_connected_bfs

N_BEAMS = 90
MAX_RANGE = 6.0
ROBOT_RADIUS = 0.18


class GenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"circle radius must be positive, got {self.radius}")

    def distance(self, p) -> float:
        """Signed distance from point to the circle boundary (negative inside)."""
        return math.hypot(p[0] - self.center[0], p[1] - self.center[1]) - self.radius

    def inside(self, bounds) -> bool:
        x, y = self.center
        r = self.radius
        return bounds[0] <= x - r and x + r <= bounds[2] and bounds[1] <= y - r and y + r <= bounds[3]


@dataclass(frozen=True)
class Rect:
    min: tuple[float, float]
    max: tuple[float, float]

    def __post_init__(self):
        if not (self.min[0] < self.max[0] and self.min[1] < self.max[1]):
            raise ValueError(f"degenerate rectangle {self.min} {self.max}")

    def distance(self, p) -> float:
        dx = max(self.min[0] - p[0], 0.0, p[0] - self.max[0])
        dy = max(self.min[1] - p[1], 0.0, p[1] - self.max[1])
        if dx == 0.0 and dy == 0.0:
            # inside: negative depth to nearest edge
            return -min(p[0] - self.min[0], self.max[0] - p[0], p[1] - self.min[1], self.max[1] - p[1])
        return math.hypot(dx, dy)

    def inside(self, bounds) -> bool:
        return (bounds[0] <= self.min[0] and self.max[0] <= bounds[2]
                and bounds[1] <= self.min[1] and self.max[1] <= bounds[3])


Obstacle = Union[Circle, Rect]


@dataclass(frozen=True)
class WorldMap:
    """One scenario. ``bounds`` is (xmin, ymin, xmax, ymax) in meters."""

    bounds: tuple[float, float, float, float]
    obstacles: tuple[Obstacle, ...]
    goal: tuple[float, float]
    goal_radius: float
    spawns: tuple[tuple[float, float], ...]

    @property
    def n_robots(self) -> int:
        return len(self.spawns)

    @property
    def circles(self) -> tuple[Circle, ...]:
        return tuple(o for o in self.obstacles if isinstance(o, Circle))

    @property
    def rects(self) -> tuple[Rect, ...]:
        return tuple(o for o in self.obstacles if isinstance(o, Rect))

    def obstacle_distance(self, p) -> float:
        """Distance from ``p`` to the nearest obstacle surface (inf if none)."""
        if not self.obstacles:
            return math.inf
        return min(o.distance(p) for o in self.obstacles)

    def to_dict(self) -> dict:
        obs = []
        for o in self.obstacles:
            if isinstance(o, Circle):
                obs.append({"type": "circle", "center": list(o.center), "radius": o.radius})
            else:
                obs.append({"type": "rect", "min": list(o.min), "max": list(o.max)})
        return {
            "bounds": list(self.bounds),
            "obstacles": obs,
            "goal": list(self.goal),
            "goal_radius": self.goal_radius,
            "spawns": [list(s) for s in self.spawns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WorldMap":
        obstacles = []
        for o in d["obstacles"]:
            if o["type"] == "circle":
                obstacles.append(Circle(tuple(o["center"]), o["radius"]))
            elif o["type"] == "rect":
                obstacles.append(Rect(tuple(o["min"]), tuple(o["max"])))
            else:
                raise ValueError(f"unknown obstacle type {o['type']!r}")
        return cls(
            bounds=tuple(d["bounds"]),
            obstacles=tuple(obstacles),
            goal=tuple(d["goal"]),
            goal_radius=d["goal_radius"],
            spawns=tuple(tuple(s) for s in d["spawns"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "WorldMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def ray_circle(origin, direction, c: Circle) -> Optional[float]:
    """Distance along a unit ray to a circle boundary, 0 if the origin is inside."""
    ox = origin[0] - c.center[0]
    oy = origin[1] - c.center[1]
    cc = ox * ox + oy * oy - c.radius * c.radius
    if cc <= 0.0:
        return 0.0
    b = ox * direction[0] + oy * direction[1]
    disc = b * b - cc
    if disc < 0.0 or b >= 0.0:
        return None
    return -b - math.sqrt(disc)


def ray_rect(origin, direction, r: Rect) -> Optional[float]:
    """Slab-method entry distance along a unit ray, 0 if the origin is inside."""
    t_near, t_far = -math.inf, math.inf
    for k in range(2):
        o, d, lo, hi = origin[k], direction[k], r.min[k], r.max[k]
        if d == 0.0:
            if o < lo or o > hi:
                return None
            continue
        t1, t2 = (lo - o) / d, (hi - o) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_near = max(t_near, t1)
        t_far = min(t_far, t2)
    if t_near > t_far or t_far < 0.0:
        return None
    return max(t_near, 0.0)


_ANGLES = 2.0 * np.pi * np.arange(N_BEAMS) / N_BEAMS
BEAM_DIRS = np.stack([np.cos(_ANGLES), np.sin(_ANGLES)], axis=1)


class Raycaster:
    """Vectorized scan of a fixed map; the obstacle arrays are packed once.

    Beam ``k`` points along angle 2*pi*k/n_beams in the world frame.
    """

    def __init__(self, world: WorldMap, n_beams: int = N_BEAMS, max_range: float = MAX_RANGE,
                 robot_radius: float = ROBOT_RADIUS):
        self.world = world
        self.max_range = max_range
        self.robot_radius = robot_radius
        ang = 2.0 * np.pi * np.arange(n_beams) / n_beams
        self.dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
        with np.errstate(divide="ignore"):
            self.inv_dirs = 1.0 / self.dirs
        circles = world.circles
        self.cc = np.array([c.center for c in circles], dtype=float).reshape(-1, 2)
        self.cr = np.array([c.radius for c in circles], dtype=float)
        rects = world.rects
        self.rmin = np.array([r.min for r in rects], dtype=float).reshape(-1, 2)
        self.rmax = np.array([r.max for r in rects], dtype=float).reshape(-1, 2)
        ahead = self.dirs.T[None] > 0.0  # (1, 2, B)
        self.r_near = np.where(ahead, self.rmin[:, :, None], self.rmax[:, :, None])  # (R, 2, B)
        self.r_far = np.where(ahead, self.rmax[:, :, None], self.rmin[:, :, None])
        self.inv_dirs_t = np.ascontiguousarray(self.inv_dirs.T)
        self.zero_beams = [(int(k), int(b)) for b, k in zip(*np.nonzero(self.dirs == 0.0))]
        self.lo = np.array(world.bounds[:2], dtype=float)
        self.hi = np.array(world.bounds[2:], dtype=float)

    def obstacle_distances(self, positions) -> np.ndarray:
        """Distance from each position to the nearest obstacle surface, 0 inside a rectangle."""
        p = np.asarray(positions, dtype=float).reshape(-1, 2)
        d = np.full(len(p), np.inf)
        if len(self.cr):
            dc = np.sqrt(((p[:, None, :] - self.cc[None]) ** 2).sum(-1)) - self.cr[None]
            d = np.minimum(d, dc.min(axis=1))
        if len(self.rmin):
            gap = np.maximum(np.maximum(self.rmin[None] - p[:, None, :], p[:, None, :] - self.rmax[None]), 0.0)
            d = np.minimum(d, np.sqrt((gap ** 2).sum(-1)).min(axis=1))
        return d

    def _circle_hits(self, origins, centers, radii):
        # origins (N,2), centers (M,2) -> (N, M, beams) hit distances
        rel = origins[:, None, :] - centers[None, :, :]
        cc = np.einsum("nmk,nmk->nm", rel, rel) - radii[None, :] ** 2
        b = rel @ self.dirs.T
        disc = b * b - cc[:, :, None]
        with np.errstate(invalid="ignore"):
            t = -b - np.sqrt(disc)
        t = np.where((disc >= 0.0) & (b < 0.0), t, np.inf)
        return np.where(cc[:, :, None] <= 0.0, 0.0, t)

    def _rects(self, origins):
        # slab test with each beam's entry/exit planes precomputed; beams on the
        # last axis so broadcasting runs over long rows: (N, R, 2, B)
        o = origins[:, None, :, None]
        with np.errstate(invalid="ignore"):
            tn = (self.r_near[None] - o) * self.inv_dirs_t
            tf = (self.r_far[None] - o) * self.inv_dirs_t
        for axis, beam in self.zero_beams:
            # a beam parallel to a slab is inside it for all t or never
            inslab = (origins[:, None, axis] >= self.rmin[None, :, axis]) & \
                (origins[:, None, axis] <= self.rmax[None, :, axis])
            tn[:, :, axis, beam] = np.where(inslab, -np.inf, np.inf)
            tf[:, :, axis, beam] = np.where(inslab, np.inf, -np.inf)
        t_near = np.maximum(tn[:, :, 0], tn[:, :, 1])
        t_far = np.minimum(tf[:, :, 0], tf[:, :, 1])
        hit = (t_near <= t_far) & (t_far >= 0.0)
        t = np.where(hit, np.maximum(t_near, 0.0), np.inf)
        return t.min(axis=1)

    def _walls(self, origins):
        inv = self.inv_dirs
        with np.errstate(invalid="ignore"):
            tx = np.where(self.dirs[None, :, 0] > 0, (self.hi[0] - origins[:, None, 0]),
                          (self.lo[0] - origins[:, None, 0])) * inv[None, :, 0]
            ty = np.where(self.dirs[None, :, 1] > 0, (self.hi[1] - origins[:, None, 1]),
                          (self.lo[1] - origins[:, None, 1])) * inv[None, :, 1]
        tx = np.where(self.dirs[None, :, 0] == 0.0, np.inf, tx)
        ty = np.where(self.dirs[None, :, 1] == 0.0, np.inf, ty)
        return np.maximum(np.minimum(tx, ty), 0.0)

    def scan_all(self, positions) -> np.ndarray:
        """Scans for every robot at once, shape (N, n_beams)."""
        p = np.asarray(positions, dtype=float).reshape(-1, 2)
        ranges = self._walls(p)
        if len(self.cr):
            ranges = np.minimum(ranges, self._circle_hits(p, self.cc, self.cr).min(axis=1))
        if len(self.rmin):
            ranges = np.minimum(ranges, self._rects(p))
        n = len(p)
        if n > 1:
            t = self._circle_hits(p, p, np.full(n, self.robot_radius))
            idx = np.arange(n)
            t[idx, idx, :] = np.inf
            ranges = np.minimum(ranges, t.min(axis=1))
        return np.minimum(ranges, self.max_range)

    def scan(self, positions, i: int) -> np.ndarray:
        return self.scan_all(positions)[i]


def lidar_scan(world: WorldMap, robot_positions: Sequence, i: int, max_range: float = MAX_RANGE,
               robot_radius: float = ROBOT_RADIUS, n_beams: int = N_BEAMS) -> np.ndarray:
    """Range readings for robot ``i``; other robots appear as discs."""
    return Raycaster(world, n_beams, max_range, robot_radius).scan(robot_positions, i)


@dataclass(frozen=True)
class ScenarioConfig:
    n_robots: int = 3
    n_obstacles: tuple[int, int] = (2, 6)
    obstacle_size: tuple[float, float] = (0.4, 1.2)  # circle diameter / rect side
    map_size: float = 8.0
    goal_radius: float = 0.5
    clearance: float = 0.1
    robot_radius: float = ROBOT_RADIUS
    comm_range: float = 1.2
    spawn_spread: float = 1.0  # spawns drawn within this radius of a team anchor
    min_goal_distance: float = 3.0
    seed: int = 0
    max_draws: int = 10_000

    def __post_init__(self):
        lo, hi = self.n_obstacles
        if self.n_robots < 1 or lo < 0 or hi < lo:
            raise ValueError(f"bad robot/obstacle counts in {self}")
        smin, smax = self.obstacle_size
        if not (0 < smin <= smax):
            raise ValueError(f"bad obstacle size range {self.obstacle_size}")
        for name in ("map_size", "goal_radius", "robot_radius", "comm_range", "spawn_spread"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.clearance < 0:
            raise ValueError("clearance must be nonnegative")


def _sample_obstacle(cfg: ScenarioConfig, rng: np.random.Generator) -> Obstacle:
    smin, smax = cfg.obstacle_size
    L = cfg.map_size
    if rng.random() < 0.5:
        r = 0.5 * rng.uniform(smin, smax)
        c = rng.uniform(r, L - r, size=2)
        return Circle((float(c[0]), float(c[1])), float(r))
    w, h = rng.uniform(smin, smax, size=2)
    x0 = rng.uniform(0.0, L - w)
    y0 = rng.uniform(0.0, L - h)
    return Rect((float(x0), float(y0)), (float(x0 + w), float(y0 + h)))


def _free(p, obstacles, margin) -> bool:
    return all(o.distance(p) >= margin for o in obstacles)


def generate_scenario(cfg: ScenarioConfig, rng: Optional[np.random.Generator] = None) -> WorldMap:
    """Rejection-sample obstacles, then the team spawns, then the goal.

    Spawns keep ``2*robot_radius + clearance`` from each other and
    ``robot_radius + clearance`` from obstacles and walls; the goal disc is
    obstacle-free and the initial communication graph is connected.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    L = cfg.map_size
    bounds = (0.0, 0.0, L, L)
    rr, cl = cfg.robot_radius, cfg.clearance
    edge = rr + cl

    def draw(sampler, accept, what):
        for _ in range(cfg.max_draws):
            x = sampler()
            if accept(x):
                return x
        raise GenerationFailed(f"could not place {what} after {cfg.max_draws} draws")

    lo, hi = cfg.n_obstacles
    n_obs = int(rng.integers(lo, hi + 1))
    obstacles: list[Obstacle] = []
    for k in range(n_obs):
        obstacles.append(draw(lambda: _sample_obstacle(cfg, rng), lambda o: o.inside(bounds),
                              f"obstacle {k}"))

    def in_bounds(p, m):
        return m <= p[0] <= L - m and m <= p[1] <= L - m

    def sample_team():
        anchor = draw(lambda: rng.uniform(edge, L - edge, size=2),
                      lambda p: _free(p, obstacles, edge), "team anchor")
        spawns = [anchor]
        for k in range(1, cfg.n_robots):
            def sample():
                ang = rng.uniform(0.0, 2.0 * np.pi)
                rad = cfg.spawn_spread * math.sqrt(rng.random())
                return anchor + rad * np.array([math.cos(ang), math.sin(ang)])

            def ok(p):
                return (in_bounds(p, edge) and _free(p, obstacles, edge)
                        and all(np.hypot(*(p - q)) >= 2 * rr + cl for q in spawns))

            spawns.append(draw(sample, ok, f"spawn {k}"))
        return spawns

    for _ in range(cfg.max_draws):
        spawns = sample_team()
        if cfg.n_robots < 2 or is_connected_bfs(adjacency(spawns, cfg.comm_range)):
            break
    else:
        raise GenerationFailed("no connected spawn configuration found")

    center = np.mean(spawns, axis=0)

    def goal_ok(g):
        return (in_bounds(g, cfg.goal_radius) and _free(g, obstacles, cfg.goal_radius)
                and np.hypot(*(g - center)) >= cfg.min_goal_distance)

    goal = draw(lambda: rng.uniform(cfg.goal_radius, L - cfg.goal_radius, size=2), goal_ok, "goal")
    return WorldMap(
        bounds=bounds,
        obstacles=tuple(obstacles),
        goal=(float(goal[0]), float(goal[1])),
        goal_radius=cfg.goal_radius,
        spawns=tuple((float(p[0]), float(p[1])) for p in spawns),
    )

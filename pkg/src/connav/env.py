"""Multi-robot navigation environment with a shared connectivity cost."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from connav.connectivity import EPS_CONN, algebraic_connectivity
from connav.world import MAX_RANGE, N_BEAMS, ROBOT_RADIUS, Raycaster, WorldMap


class StepAfterDone(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    robot_radius: float = ROBOT_RADIUS
    comm_range: float = 1.2
    v_max: float = 0.7
    dt: float = 0.1
    max_steps: int = 500
    max_range: float = MAX_RANGE
    n_beams: int = N_BEAMS
    r_coll: float = -100.0
    r_goal: float = 100.0
    w_goal: float = 10.0
    eps_conn: float = EPS_CONN


@dataclass
class StepResult:
    rewards: np.ndarray
    cost: int
    done: bool
    reason: Optional[str]  # "success" | "collision" | "timeout" | None
    collisions: np.ndarray
    lambda2: float


def obs_dim(n_robots: int, n_beams: int = N_BEAMS) -> int:
    return n_beams + 4 + 2 * (n_robots - 1)


def clamp_action(a, v_max: float) -> np.ndarray:
    """Scale ``a`` (shape (..., 2)) down to norm ``v_max`` where it exceeds it."""
    a = np.asarray(a, dtype=float)
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.where(norm > v_max, v_max / np.where(norm > 0, norm, 1.0), 1.0)
    return a * scale


def team_collisions(world: WorldMap, positions: np.ndarray, robot_radius: float,
                    raycaster: Optional[Raycaster] = None) -> np.ndarray:
    """Per-robot flag: closer than R_r to an obstacle or 2 R_r to a teammate.

    ``raycaster`` (built for ``world``) supplies the packed obstacle arrays.
    """
    n = len(positions)
    if raycaster is not None:
        hit = raycaster.obstacle_distances(positions) < robot_radius
    else:
        hit = np.array([world.obstacle_distance(p) < robot_radius for p in positions])
    if n > 1:
        d = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        hit |= (d < 2 * robot_radius).any(axis=1)
    return hit


def compute_rewards(world: WorldMap, prev_positions, positions, cfg: EnvConfig,
                    collisions: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-robot reward: goal progress (or the team bonus) plus collision penalty."""
    prev = np.asarray(prev_positions, dtype=float)
    pos = np.asarray(positions, dtype=float)
    g = np.asarray(world.goal, dtype=float)
    dst_prev = np.linalg.norm(prev - g, axis=1)
    dst = np.linalg.norm(pos - g, axis=1)
    if np.all(dst < world.goal_radius - cfg.robot_radius):
        r = np.full(len(pos), cfg.r_goal)
    else:
        r = cfg.w_goal * (dst_prev - dst)
    if collisions is None:
        collisions = team_collisions(world, pos, cfg.robot_radius)
    return r + np.where(collisions, cfg.r_coll, 0.0)


def team_in_goal(world: WorldMap, positions, robot_radius: float) -> bool:
    d = np.linalg.norm(np.asarray(positions) - np.asarray(world.goal), axis=1)
    return bool(np.all(d < world.goal_radius - robot_radius))


class NavEnv:
    """Holonomic disc robots on one map, all sharing a single policy.

    Positions integrate ``p += clamp(a) * dt`` simultaneously; walls clip the
    position and zero the normal velocity component.
    """

    def __init__(self, world: WorldMap, cfg: EnvConfig = EnvConfig()):
        self.world = world
        self.cfg = cfg
        self.n = world.n_robots
        self.raycaster = Raycaster(world, cfg.n_beams, cfg.max_range, cfg.robot_radius)
        self.goal = np.asarray(world.goal, dtype=float)
        m = cfg.robot_radius
        self._lo = np.array(world.bounds[:2]) + m
        self._hi = np.array(world.bounds[2:]) - m
        self.reset()

    def reset(self) -> np.ndarray:
        self.positions = np.array(self.world.spawns, dtype=float)
        self.velocities = np.zeros_like(self.positions)
        self.t = 0
        self.done = False
        self.reason: Optional[str] = None
        self.last_lambda2 = algebraic_connectivity(self.positions, self.cfg.comm_range)
        return self.observe_all()

    def observe_all(self) -> np.ndarray:
        """Stacked observations [o_l, o_v, o_g, o_p] for every robot, shape (N, obs_dim)."""
        n = self.n
        scans = self.raycaster.scan_all(self.positions) / self.cfg.max_range
        o_g = self.goal[None, :] - self.positions
        rel = self.positions[None, :, :] - self.positions[:, None, :]  # rel[i, j] = p_j - p_i
        mask = ~np.eye(n, dtype=bool)
        o_p = rel[mask].reshape(n, 2 * (n - 1))
        return np.concatenate([scans, self.velocities, o_g, o_p], axis=1)

    def observe(self, i: int) -> np.ndarray:
        return self.observe_all()[i]

    def step(self, actions) -> StepResult:
        if self.done:
            raise StepAfterDone("episode already finished; call reset()")
        cfg = self.cfg
        a = clamp_action(np.asarray(actions, dtype=float).reshape(self.n, 2), cfg.v_max)
        prev = self.positions
        new = prev + a * cfg.dt
        clipped = (new < self._lo) | (new > self._hi)
        new = np.clip(new, self._lo, self._hi)
        self.velocities = np.where(clipped, 0.0, a)
        self.positions = new
        self.t += 1

        collisions = team_collisions(self.world, new, cfg.robot_radius, self.raycaster)
        rewards = compute_rewards(self.world, prev, new, cfg, collisions)
        lam2 = algebraic_connectivity(new, cfg.comm_range)
        self.last_lambda2 = lam2
        cost = int(self.n > 1 and lam2 <= cfg.eps_conn)

        reason = None
        if collisions.any():
            reason = "collision"
        elif team_in_goal(self.world, new, cfg.robot_radius):
            reason = "success"
        elif self.t >= cfg.max_steps:
            reason = "timeout"
        self.done = reason is not None
        self.reason = reason
        return StepResult(rewards, cost, self.done, reason, collisions, lam2)


TRAJECTORY_COLUMNS = ["t", "robot", "px", "py", "vx", "vy", "ax", "ay", "r", "c", "lambda2"]


class TrajectoryRecorder:
    """Accumulates per-robot rows for the trajectory CSV."""

    def __init__(self):
        self.rows: list[list] = []

    def record(self, env: NavEnv, actions, result: StepResult) -> None:
        a = np.asarray(actions, dtype=float).reshape(env.n, 2)
        for i in range(env.n):
            self.rows.append([
                env.t, i,
                float(env.positions[i, 0]), float(env.positions[i, 1]),
                float(env.velocities[i, 0]), float(env.velocities[i, 1]),
                float(a[i, 0]), float(a[i, 1]),
                float(result.rewards[i]), int(result.cost), float(result.lambda2),
            ])

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TRAJECTORY_COLUMNS)
            w.writerows(self.rows)


def read_trajectory(path) -> list[dict]:
    with open(path, newline="") as f:
        out = []
        for row in csv.DictReader(f):
            out.append({k: (int(v) if k in ("t", "robot", "c") else float(v)) for k, v in row.items()})
        return out


def expert_observation(obs: np.ndarray, n_beams: int = N_BEAMS) -> np.ndarray:
    """Strip teammate positions: [o_l, o_v, o_g] view of full observations."""
    return obs[..., : n_beams + 4]


def goal_distance(world: WorldMap, p) -> float:
    return math.hypot(p[0] - world.goal[0], p[1] - world.goal[1])

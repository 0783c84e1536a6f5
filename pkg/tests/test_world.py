import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from connav.connectivity import adjacency, is_connected_bfs
from connav.world import (Circle, GenerationFailed, Raycaster, Rect, ScenarioConfig, WorldMap,
                          generate_scenario, lidar_scan, ray_circle, ray_rect)

from conftest import open_world


def march(origin, direction, inside, t_max=20.0, step=1e-3):
    """First grid t where origin + t*dir is strictly inside; independent of the slab/quadratic code."""
    ts = np.arange(0.0, t_max, step)
    pts = np.asarray(origin) + ts[:, None] * np.asarray(direction)
    hit = np.flatnonzero(inside(pts))
    return None if len(hit) == 0 else ts[hit[0]]


def in_circle(c, closed=False):
    if closed:
        return lambda p: np.hypot(p[:, 0] - c.center[0], p[:, 1] - c.center[1]) <= c.radius
    return lambda p: np.hypot(p[:, 0] - c.center[0], p[:, 1] - c.center[1]) < c.radius


def in_rect(r, closed=False):
    if closed:
        return lambda p: ((p[:, 0] >= r.min[0]) & (p[:, 0] <= r.max[0])
                          & (p[:, 1] >= r.min[1]) & (p[:, 1] <= r.max[1]))
    return lambda p: ((p[:, 0] > r.min[0]) & (p[:, 0] < r.max[0])
                      & (p[:, 1] > r.min[1]) & (p[:, 1] < r.max[1]))


def check_against_march(got, origin, d, inside):
    """Strict interior gives an upper bound, the closed shape a lower bound; tangent rays may go either way."""
    strict = march(origin, d, inside(False))
    closed = march(origin, d, inside(True))
    if strict is not None:
        assert got is not None and got <= strict + 2e-3
    if got is not None:
        assert got >= 0
        if closed is not None:
            assert got >= closed - 2e-3


def test_ray_circle_examples():
    c = Circle((2.0, 0.0), 0.5)
    assert ray_circle((0, 0), (1, 0), c) == pytest.approx(1.5, abs=1e-12)
    assert march((0, 0), (1, 0), in_circle(c)) == pytest.approx(1.5, abs=2e-3)
    assert ray_circle((0, 0), (1, 0), Circle((0.0, 2.0), 0.5)) is None
    assert ray_circle((2, 0), (1, 0), c) == 0.0


def test_ray_rect_examples():
    r = Rect((1.0, -1.0), (2.0, 1.0))
    assert ray_rect((0, 0), (1, 0), r) == pytest.approx(1.0)
    assert ray_rect((0, 0), (0, 1), r) is None
    assert ray_rect((1.5, 0), (1, 0), r) == 0.0


unit_angle = st.floats(0.0, 2 * math.pi)
coord = st.floats(-4.0, 4.0)


@settings(max_examples=200, deadline=None)
@given(coord, coord, unit_angle, coord, coord, st.floats(0.1, 2.0))
def test_ray_circle_matches_marching(ox, oy, ang, cx, cy, r):
    d = (math.cos(ang), math.sin(ang))
    c = Circle((cx, cy), r)
    check_against_march(ray_circle((ox, oy), d, c), (ox, oy), d, lambda closed: in_circle(c, closed))


@settings(max_examples=200, deadline=None)
@given(coord, coord, unit_angle, coord, coord, st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_ray_rect_matches_marching(ox, oy, ang, x0, y0, w, h):
    d = (math.cos(ang), math.sin(ang))
    r = Rect((x0, y0), (x0 + w, y0 + h))
    check_against_march(ray_rect((ox, oy), d, r), (ox, oy), d, lambda closed: in_rect(r, closed))


@settings(max_examples=100, deadline=None)
@given(coord, coord, unit_angle, st.floats(0.2, 2.0), st.floats(0.1, 0.9))
def test_shrinking_circle_never_decreases_range(cx, cy, ang, r, shrink):
    d = (math.cos(ang), math.sin(ang))
    big = ray_circle((5.0, 5.0), d, Circle((cx, cy), r))
    small = ray_circle((5.0, 5.0), d, Circle((cx, cy), r * shrink))
    if small is not None:
        assert big is not None and big <= small + 1e-12
    if big is not None:
        assert big >= 0


def test_lidar_empty_map_all_max_range():
    w = open_world([(0, 0)])
    scan = lidar_scan(w, [(0, 0)], 0)
    assert scan.shape == (90,)
    assert np.all(scan == 6.0)


def test_lidar_circle_obstacle():
    w = open_world([(0, 0)], obstacles=[Circle((2.0, 0.0), 0.5)])
    scan = lidar_scan(w, [(0, 0)], 0)
    assert scan[0] == pytest.approx(1.5)
    assert scan[45] == 6.0


def test_lidar_sees_other_robot_as_disc():
    w = open_world([(0, 0), (1, 0)])
    scan = lidar_scan(w, [(0, 0), (1, 0)], 0, robot_radius=0.18)
    assert scan[0] == pytest.approx(0.82)
    # own disc is never seen
    assert np.all(lidar_scan(w, [(0, 0)], 0) == 6.0)


def test_lidar_walls_and_rect():
    w = WorldMap((0, 0, 4, 4), (Rect((3.0, 1.5), (3.5, 2.5)),), (1, 1), 0.5, ((1.0, 2.0),))
    scan = lidar_scan(w, [(1.0, 2.0)], 0)
    assert scan[0] == pytest.approx(2.0)  # rect face at x=3
    assert scan[45] == pytest.approx(1.0)  # west wall
    assert scan[22] == pytest.approx(2.0 / math.sin(2 * math.pi * 22 / 90))  # north wall, slanted
    for k in range(90):
        ang = 2 * math.pi * k / 90
        d = (math.cos(ang), math.sin(ang))
        hits = [t for t in (ray_rect((1.0, 2.0), d, w.obstacles[0]),) if t is not None]
        assert scan[k] <= min(hits + [6.0]) + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scan_bounds_and_relabel_invariance(seed):
    rng = np.random.default_rng(seed)
    w = generate_scenario(ScenarioConfig(n_robots=4), rng)
    pos = np.array(w.spawns)
    rc = Raycaster(w)
    scans = rc.scan_all(pos)
    assert np.all((scans >= 0) & (scans <= rc.max_range))
    # permuting the other robots leaves robot 0's scan unchanged
    perm = np.concatenate([[0], rng.permutation(np.arange(1, 4))])
    assert np.array_equal(rc.scan_all(pos[perm])[0], scans[0])


def test_generate_deterministic():
    cfg = ScenarioConfig(seed=11)
    a = generate_scenario(cfg)
    b = generate_scenario(cfg)
    assert a == b
    assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_generate_no_obstacles():
    w = generate_scenario(ScenarioConfig(n_obstacles=(0, 0)))
    assert w.obstacles == ()


def test_generate_1000_maps_satisfy_invariants():
    cfg = ScenarioConfig(n_robots=3)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        w = generate_scenario(cfg, rng)
        p = np.array(w.spawns)
        d = np.linalg.norm(p[:, None] - p[None], axis=-1) + np.eye(3) * 1e9
        assert d.min() >= 2 * cfg.robot_radius + cfg.clearance
        assert is_connected_bfs(adjacency(p, cfg.comm_range))
        for s in w.spawns:
            assert w.obstacle_distance(s) >= cfg.robot_radius + cfg.clearance
        assert w.obstacle_distance(w.goal) >= w.goal_radius
        assert all(o.inside(w.bounds) for o in w.obstacles)


def test_generation_failed_when_overconstrained():
    cfg = ScenarioConfig(n_robots=3, map_size=1.0, n_obstacles=(0, 0), goal_radius=0.4, min_goal_distance=5.0, max_draws=50)
    with pytest.raises(GenerationFailed):
        generate_scenario(cfg)


def test_map_json_round_trip(tmp_path):
    w = generate_scenario(ScenarioConfig(seed=3, n_obstacles=(4, 4)))
    w.save(tmp_path / "m.json")
    assert WorldMap.load(tmp_path / "m.json") == w


def test_invalid_obstacles_rejected():
    with pytest.raises(ValueError):
        Circle((0, 0), 0.0)
    with pytest.raises(ValueError):
        Rect((1, 0), (0, 1))
    with pytest.raises(ValueError):
        ScenarioConfig(obstacle_size=(0.0, 1.0))


def test_packed_obstacle_distances_match_per_obstacle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        world = generate_scenario(ScenarioConfig(), rng)
        rc = Raycaster(world)
        pts = rng.uniform(world.bounds[:2], world.bounds[2:], (40, 2))
        ref = np.array([max(world.obstacle_distance(p), 0.0) for p in pts])
        got = np.maximum(rc.obstacle_distances(pts), 0.0)
        assert np.allclose(got, ref, atol=1e-12)

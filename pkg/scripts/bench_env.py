"""Median wall time of one env.step plus observe_all (3 robots, 90 beams, 10 obstacles)."""
import argparse
import time

import numpy as np

from connav.env import EnvConfig, NavEnv
from connav.world import ScenarioConfig, generate_scenario


def bench(n_steps: int = 5000, n_robots: int = 3, n_obstacles: int = 10, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    world = generate_scenario(ScenarioConfig(n_robots=n_robots, n_obstacles=(n_obstacles, n_obstacles),
                                             map_size=10.0, goal_radius=1.0), rng)
    env = NavEnv(world, EnvConfig(max_steps=10**9))
    times = []
    for _ in range(n_steps):
        a = rng.uniform(-0.05, 0.05, (n_robots, 2))
        t0 = time.perf_counter()
        env.step(a)
        env.observe_all()
        times.append(time.perf_counter() - t0)
        if env.done:
            env.reset()
    return float(np.median(times))


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=5000)
    args = p.parse_args()
    print(f"median step+observe: {bench(args.steps) * 1e3:.3f} ms")

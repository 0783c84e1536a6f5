import pytest

from connav.net import NetConfig, PolicyNet, ValueNet
from connav.world import WorldMap

# <= 500 parameters each, for finite-difference checks
SMALL = NetConfig(conv=((2, 5, 2), (2, 3, 2)), feature_dim=4, hidden=(8, 8), value_hidden=(4, 4))


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_policy():
    return PolicyNet(SMALL)


@pytest.fixture
def small_value():
    return ValueNet(SMALL)


def open_world(spawns, goal=(0.0, 0.0), goal_radius=1.0, obstacles=(), half=10.0):
    return WorldMap(bounds=(-half, -half, half, half), obstacles=tuple(obstacles), goal=tuple(goal),
                    goal_radius=goal_radius, spawns=tuple(tuple(map(float, s)) for s in spawns))


def random_obs(rng, n, cfg=SMALL):
    obs = rng.uniform(-1.0, 1.0, (n, cfg.obs_dim))
    obs[:, : cfg.n_beams] = rng.uniform(0.0, 1.0, (n, cfg.n_beams))
    return obs


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

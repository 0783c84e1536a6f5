"""Experiment configuration: dataclass defaults, key=value files, overrides."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from connav.cpo import TrustRegionConfig
from connav.env import EnvConfig
from connav.net import NetConfig
from connav.world import ScenarioConfig


@dataclass(frozen=True)
class ExperimentConfig:
    algo: str = "cpo"  # cpo | trpo
    bc: bool = True
    n_robots: int = 3
    total_steps: int = 300_000
    batch_size: int = 2048  # N_batch, pooled robot-timesteps per update
    gamma: float = 0.99
    gamma_c: float = 0.999
    bc_coef: float = 0.1
    vf_step_size: float = 0.1
    vf_iters: int = 25
    max_kl: float = 0.01
    cost_limit: float = 0.1
    seed: int = 0
    maps: str = ""  # directory of map JSON files; empty -> generate from map_seed
    n_train_maps: int = 20
    n_eval_maps: int = 50
    map_seed: int = 7
    n_obstacles_min: int = 2
    n_obstacles_max: int = 6
    robot_radius: float = 0.18
    comm_range: float = 1.2
    goal_radius: float = 1.0
    v_max: float = 0.7
    dt: float = 0.1
    max_steps: int = 500
    checkpoint_every: int = 10
    net_dtype: str = "float32"

    def __post_init__(self):
        if self.algo not in ("cpo", "trpo"):
            raise ValueError(f"algo must be cpo or trpo, got {self.algo!r}")
        if self.n_robots < 1 or self.batch_size < 1 or self.total_steps < 0:
            raise ValueError("counts must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(cls, k, v) for k, v in d.items()})

    def replace(self, **overrides) -> "ExperimentConfig":
        clean = {k: _coerce(type(self), k, v) for k, v in overrides.items() if v is not None}
        return dataclasses.replace(self, **clean)

    @property
    def label(self) -> str:
        return self.algo.upper() + ("+BC" if self.bc else "")

    def env_config(self) -> EnvConfig:
        return EnvConfig(robot_radius=self.robot_radius, comm_range=self.comm_range, v_max=self.v_max,
                         dt=self.dt, max_steps=self.max_steps)

    def scenario_config(self) -> ScenarioConfig:
        return ScenarioConfig(n_robots=self.n_robots, n_obstacles=(self.n_obstacles_min, self.n_obstacles_max),
                              goal_radius=self.goal_radius, robot_radius=self.robot_radius,
                              comm_range=self.comm_range, seed=self.map_seed)

    def net_config(self) -> NetConfig:
        return NetConfig(n_robots=self.n_robots, init_logstd=math.log(0.5 * self.v_max), dtype=self.net_dtype)

    def trust_region(self) -> TrustRegionConfig:
        return TrustRegionConfig(max_kl=self.max_kl, cost_limit=self.cost_limit, bc_coef=self.bc_coef,
                                 gamma=self.gamma, gamma_c=self.gamma_c, vf_step_size=self.vf_step_size,
                                 vf_iters=self.vf_iters)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(cls, key: str, value):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    t = types[key]
    if not isinstance(value, str):
        return value
    v = value.strip()
    if t in ("bool", bool):
        if v.lower() in _TRUE:
            return True
        if v.lower() in _FALSE:
            return False
        raise ValueError(f"{key}: not a boolean: {value!r}")
    if t in ("int", int):
        return int(float(v)) if "e" in v.lower() else int(v)
    if t in ("float", float):
        return float(v)
    return v


def read_kv_file(path) -> dict:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, **overrides) -> ExperimentConfig:
    base = ExperimentConfig.from_dict(read_kv_file(path)) if path else ExperimentConfig()
    return base.replace(**overrides)


def write_kv_file(cfg: ExperimentConfig, path) -> None:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")

"""Scripted potential-field navigation expert on single-robot observations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from connav.env import clamp_action
from connav.world import MAX_RANGE, N_BEAMS


@dataclass(frozen=True)
class ScriptedExpertConfig:
    k_goal: float = 1.0
    k_obstacle: float = 0.3
    influence: float = 1.0  # meters
    v_max: float = 0.7
    max_range: float = MAX_RANGE
    n_beams: int = N_BEAMS

    def __post_init__(self):
        if min(self.k_goal, self.k_obstacle, self.influence, self.v_max) <= 0:
            raise ValueError("expert gains and ranges must be positive")


class ScriptedExpert:
    """Goal attraction saturated at v_max plus inverse-range repulsion per beam.

    ``act`` takes õ = [o_l (normalized scan), o_v, o_g], or a batch of them,
    and ignores anything after o_g.
    """

    def __init__(self, cfg: ScriptedExpertConfig = ScriptedExpertConfig()):
        self.cfg = cfg
        ang = 2.0 * np.pi * np.arange(cfg.n_beams) / cfg.n_beams
        self.dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def act(self, obs) -> np.ndarray:
        cfg = self.cfg
        o = np.asarray(obs, dtype=float)
        single = o.ndim == 1
        o = np.atleast_2d(o)
        nb = cfg.n_beams
        ranges = o[:, :nb] * cfg.max_range
        o_g = o[:, nb + 2: nb + 4]

        v = clamp_action(cfg.k_goal * o_g, cfg.v_max)
        near = ranges < cfg.influence
        inv = 1.0 / np.maximum(ranges, 1e-3)
        push = np.where(near, cfg.k_obstacle * (inv - 1.0 / cfg.influence), 0.0)
        v = v - push @ self.dirs
        v = clamp_action(v, cfg.v_max)
        return v[0] if single else v

    __call__ = act

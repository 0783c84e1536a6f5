"""Rollouts, the training loop (parameter-shared CPO/TRPO with BC) and evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from connav.config import ExperimentConfig
from connav.cpo import Learner
from connav.env import EnvConfig, NavEnv, TrajectoryRecorder, expert_observation
from connav.expert import ScriptedExpert, ScriptedExpertConfig
from connav.net import PolicyNet, ValueNet, load_checkpoint, log_prob, save_checkpoint
from connav.rl import Batch, append_jsonl, read_jsonl
from connav.world import WorldMap, generate_scenario

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.npz"
DIAGNOSTICS = "diagnostics.jsonl"


# ---------------------------------------------------------------------- maps

def generate_maps(cfg, count: int, stream: int, seed: int) -> list[WorldMap]:
    """``count`` maps from an independent seed stream (0 = training, 1 = evaluation)."""
    rng = np.random.default_rng([seed, stream])
    return [generate_scenario(cfg, rng) for _ in range(count)]


def load_maps(directory) -> list[WorldMap]:
    paths = sorted(Path(directory).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no map files in {directory}")
    return [WorldMap.load(p) for p in paths]


def write_maps(maps: Sequence[WorldMap], out_dir) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for k, m in enumerate(maps):
            p = out / f"map_{k:04d}.json"
            m.save(p)
            paths.append(p)
    except OSError as e:
        raise OSError(f"cannot write maps to {out}: {e.strerror or e}") from e
    return paths


def training_maps(cfg: ExperimentConfig) -> list[WorldMap]:
    if cfg.maps:
        return load_maps(cfg.maps)
    return generate_maps(cfg.scenario_config(), cfg.n_train_maps, 0, cfg.map_seed)


def evaluation_maps(cfg: ExperimentConfig) -> list[WorldMap]:
    return generate_maps(cfg.scenario_config(), cfg.n_eval_maps, 1, cfg.map_seed)


# ------------------------------------------------------------------ rollouts

def run_episode(env: NavEnv, act: Callable[[np.ndarray], np.ndarray]):
    """Roll one team episode; ``act`` maps stacked observations to actions (+ extras)."""
    obs = env.reset()
    steps = []
    while not env.done:
        a, extra = act(obs)
        res = env.step(a)
        nxt = env.observe_all()
        steps.append((obs, a, extra, res, nxt))
        obs = nxt
    return steps


def collect_batch(policy: PolicyNet, theta, envs: Sequence[NavEnv], rng: np.random.Generator,
                  min_steps: int, expert: Optional[ScriptedExpert] = None) -> Batch:
    """Whole episodes on randomly drawn maps until more than ``min_steps`` robot-steps."""
    logstd = policy.logstd(theta)
    std = np.exp(logstd)
    parts = []
    total = 0
    outcomes = []
    while total <= min_steps:
        env = envs[int(rng.integers(len(envs)))]

        def act(obs):
            mean = policy.mean(theta, obs)
            a = mean + std * rng.standard_normal(mean.shape)
            return a, log_prob(mean, logstd, a)

        steps = run_episode(env, act)
        n = env.n
        T = len(steps)
        obs = np.stack([s[0] for s in steps], axis=1)  # (N, T, D)
        nxt = np.stack([s[4] for s in steps], axis=1)
        acts = np.stack([s[1] for s in steps], axis=1)
        logp = np.stack([s[2] for s in steps], axis=1)
        rew = np.stack([s[3].rewards for s in steps], axis=1)
        cost = np.array([s[3].cost for s in steps], dtype=float)
        terminal = np.zeros(T, dtype=bool)
        terminal[-1] = env.reason != "timeout"
        parts.append(Batch(
            obs=obs.reshape(n * T, -1), next_obs=nxt.reshape(n * T, -1), actions=acts.reshape(n * T, 2),
            logp=logp.reshape(n * T), rewards=rew.reshape(n * T), costs=np.tile(cost, n),
            terminal=np.tile(terminal, n), episodes=[(i * T, (i + 1) * T) for i in range(n)],
        ))
        outcomes.append(env.reason)
        total += n * T
    batch = Batch.concat(parts)
    if expert is not None:
        batch.expert_actions = expert.act(expert_observation(batch.obs, policy.cfg.n_beams))
    batch.info["outcomes"] = outcomes
    return batch


# ---------------------------------------------------------------- training

def make_learner(cfg: ExperimentConfig, rng: np.random.Generator) -> Learner:
    ncfg = cfg.net_config()
    policy, vnet = PolicyNet(ncfg), ValueNet(ncfg)
    # the cost critic starts at V_c = 0 so a cost-free batch gives exactly the unconstrained step
    return Learner(policy, vnet, policy.init_params(rng), vnet.init_params(rng),
                   vnet.init_params(rng, zero_head=True))


def expert_for(cfg: ExperimentConfig) -> ScriptedExpert:
    return ScriptedExpert(ScriptedExpertConfig(v_max=cfg.v_max))


def _save(path, cfg: ExperimentConfig, learner: Learner, rng, n_updates: int, timesteps: int):
    save_checkpoint(
        path, learner.policy.cfg,
        {"policy": learner.theta, "value": learner.phi, "cost_value": learner.phi_c},
        {"policy": learner.policy.layout, "value": learner.vnet.layout, "cost_value": learner.vnet.layout},
        extra={"config": cfg.to_dict(), "rng": rng.bit_generator.state,
               "updates": n_updates, "timesteps": timesteps},
    )


def train(cfg: ExperimentConfig, out_dir, progress: Optional[Callable[[dict], None]] = None) -> Path:
    """Run training into ``out_dir``; resumes from its checkpoint when present."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT
    log_path = out / DIAGNOSTICS
    rng = np.random.default_rng([cfg.seed, 2])
    learner = make_learner(cfg, np.random.default_rng([cfg.seed, 3]))
    n_updates = timesteps = 0

    if ckpt.exists():
        _, params, header = load_checkpoint(ckpt)
        extra = header["extra"]
        if extra["config"] != cfg.to_dict():
            raise ValueError(f"{ckpt} was written with a different config; use a fresh --out")
        learner.theta, learner.phi, learner.phi_c = params["policy"], params["value"], params["cost_value"]
        rng.bit_generator.state = extra["rng"]
        n_updates, timesteps = extra["updates"], extra["timesteps"]
        # drop records written after the checkpoint
        records = read_jsonl(log_path) if log_path.exists() else []
        header_rec = [r for r in records if "config" in r]
        kept = [r for r in records if r.get("update", 0) <= n_updates and "update" in r]
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in header_rec + kept))
        log.info("resumed %s at update %d (%d steps)", out, n_updates, timesteps)
    else:
        if log_path.exists():
            log_path.unlink()
        append_jsonl(log_path, {"config": cfg.to_dict()})

    env_cfg = cfg.env_config()
    envs = [NavEnv(m, env_cfg) for m in training_maps(cfg)]
    expert = expert_for(cfg)
    tr = cfg.trust_region()

    while timesteps < cfg.total_steps:
        batch = collect_batch(learner.policy, learner.theta, envs, rng, cfg.batch_size, expert)
        timesteps += len(batch)
        diag = learner.update(batch, tr, mode=cfg.algo, bc=cfg.bc)
        n_updates += 1
        outcomes = batch.info["outcomes"]
        diag.update(update=n_updates, timesteps=timesteps,
                    success=outcomes.count("success") / len(outcomes))
        append_jsonl(log_path, diag)
        if progress:
            progress(diag)
        if n_updates % cfg.checkpoint_every == 0:
            _save(ckpt, cfg, learner, rng, n_updates, timesteps)
    _save(ckpt, cfg, learner, rng, n_updates, timesteps)
    return ckpt


# --------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    success_rate: float
    connectivity_rate: float
    travel_time_mean: Optional[float]
    successes: int
    collisions: int
    timeouts: int
    episodes: int
    outcomes: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def evaluate_actor(act: Callable[[np.ndarray], np.ndarray], maps: Sequence[WorldMap], env_cfg: EnvConfig,
                   episodes_per_map: int = 1, recorder_for: Optional[Callable[[int], TrajectoryRecorder]] = None
                   ) -> EvalReport:
    """Deterministic team rollouts. Connectivity means lambda2 > eps at every step."""
    outcomes = []
    for k, world in enumerate(maps):
        env = NavEnv(world, env_cfg)
        for e in range(episodes_per_map):
            obs = env.reset()
            connected = env.n < 2 or env.last_lambda2 > env_cfg.eps_conn
            rec = recorder_for(k) if recorder_for else None
            while not env.done:
                a = act(obs)
                res = env.step(a)
                connected &= res.cost == 0
                if rec is not None:
                    rec.record(env, a, res)
                obs = env.observe_all()
            outcomes.append({"map": k, "episode": e, "reason": env.reason, "steps": env.t,
                             "connected": bool(connected)})
    n = len(outcomes)
    succ = [o for o in outcomes if o["reason"] == "success"]
    times = [o["steps"] * env_cfg.dt for o in succ]
    return EvalReport(
        success_rate=len(succ) / n if n else 0.0,
        connectivity_rate=sum(o["connected"] for o in outcomes) / n if n else 0.0,
        travel_time_mean=float(np.mean(times)) if times else None,
        successes=len(succ),
        collisions=sum(o["reason"] == "collision" for o in outcomes),
        timeouts=sum(o["reason"] == "timeout" for o in outcomes),
        episodes=n,
        outcomes=outcomes,
    )


def load_policy(checkpoint):
    """(ExperimentConfig or None, PolicyNet, theta) from a training checkpoint."""
    ncfg, params, header = load_checkpoint(checkpoint)
    policy = PolicyNet(ncfg)
    if header["layouts"]["policy"] != policy.layout.to_dict():
        raise ValueError(f"{checkpoint}: parameter layout does not match the network config")
    theta = params["policy"]
    cfg_dict = header.get("extra", {}).get("config")
    cfg = ExperimentConfig.from_dict(cfg_dict) if cfg_dict else None
    return cfg, policy, theta


def evaluate(checkpoint, maps: Sequence[WorldMap], env_cfg: Optional[EnvConfig] = None,
             episodes_per_map: int = 1) -> EvalReport:
    cfg, policy, theta = load_policy(checkpoint)
    if env_cfg is None:
        env_cfg = cfg.env_config() if cfg else EnvConfig()
    if maps and maps[0].n_robots != policy.cfg.n_robots:
        raise ValueError(f"maps have {maps[0].n_robots} robots, policy expects {policy.cfg.n_robots}")
    return evaluate_actor(lambda obs: policy.mean(theta, obs), maps, env_cfg, episodes_per_map)

"""Three-arm ablation (CPO+BC, TRPO+BC, CPO) over seeds, with cached results.

Each run lives in ``out_dir/<arm>_s<seed>/``; training resumes from its
checkpoint and a finished run is not retrained, so re-invoking is cheap.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from connav.config import ExperimentConfig
from connav.rl import read_jsonl
from connav.train import CHECKPOINT, DIAGNOSTICS, evaluate, evaluation_maps, train

log = logging.getLogger(__name__)

ARMS = {"cpo_bc": ("cpo", True), "trpo_bc": ("trpo", True), "cpo": ("cpo", False)}
REPORT = "eval_report.json"
SUMMARY = "summary.json"


def arm_config(base: ExperimentConfig, arm: str, seed: int) -> ExperimentConfig:
    algo, bc = ARMS[arm]
    return base.replace(algo=algo, bc=bc, seed=seed)


def _finished(run: Path, cfg: ExperimentConfig) -> bool:
    path = run / DIAGNOSTICS
    if not (run / CHECKPOINT).exists() or not path.exists():
        return False
    recs = read_jsonl(path)
    if not recs or recs[0].get("config") != cfg.to_dict():
        return False
    return any(r.get("timesteps", 0) >= cfg.total_steps for r in recs[1:])


def late_cost(records: list[dict], frac: float = 0.25) -> float:
    """Mean logged J_c over the last ``frac`` of updates."""
    jc = [r["J_c"] for r in records if "J_c" in r]
    k = max(1, int(round(frac * len(jc))))
    return float(np.mean(jc[-k:]))


def run_one(base: ExperimentConfig, arm: str, seed: int, out_dir) -> dict:
    cfg = arm_config(base, arm, seed)
    run = Path(out_dir) / f"{arm}_s{seed}"
    report_path = run / REPORT
    if not _finished(run, cfg):
        log.info("training %s seed %d -> %s", arm, seed, run)
        train(cfg, run, lambda d: log.debug("%s s%d update %d J_c %.3f success %.2f",
                                            arm, seed, d["update"], d["J_c"], d["success"]))
        report_path.unlink(missing_ok=True)
    if report_path.exists():
        report = json.loads(report_path.read_text())
    else:
        rep = evaluate(run / CHECKPOINT, evaluation_maps(cfg), cfg.env_config())
        rep.save(report_path)
        report = rep.to_dict()
    records = read_jsonl(run / DIAGNOSTICS)[1:]
    return {
        "arm": arm, "seed": seed,
        "success_rate": report["success_rate"],
        "connectivity_rate": report["connectivity_rate"],
        "travel_time_mean": report["travel_time_mean"],
        "late_J_c": late_cost(records),
        "updates": len(records),
        "timesteps": records[-1]["timesteps"] if records else 0,
    }


def summarize(runs: list[dict]) -> dict:
    out = {}
    for arm in ARMS:
        rs = [r for r in runs if r["arm"] == arm]
        if not rs:
            continue
        out[arm] = {
            "success_rate": float(np.mean([r["success_rate"] for r in rs])),
            "connectivity_rate": float(np.mean([r["connectivity_rate"] for r in rs])),
            "late_J_c": float(np.mean([r["late_J_c"] for r in rs])),
            "seeds": [r["seed"] for r in rs],
        }
    return out


def run_ablation(base: ExperimentConfig, out_dir, seeds: Sequence[int] = (0, 1, 2),
                 arms: Optional[Sequence[str]] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [run_one(base, arm, s, out) for arm in (arms or ARMS) for s in seeds]
    result = {"config": base.to_dict(), "runs": runs, "summary": summarize(runs)}
    (out / SUMMARY).write_text(json.dumps(result, indent=1, sort_keys=True))
    return result

"""Command-line entry points: gen-maps, train, eval, export-traj."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from connav.config import ExperimentConfig, load_config, write_kv_file
from connav.env import NavEnv, TrajectoryRecorder
from connav.train import (DIAGNOSTICS, evaluate_actor, evaluation_maps, expert_for, generate_maps, load_maps,
                          load_policy, train, write_maps)
from connav.world import WorldMap

log = logging.getLogger("connav")


def _bool(s: str) -> bool:
    v = s.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


def _overrides(args) -> dict:
    out = {
        "algo": getattr(args, "algo", None),
        "bc": getattr(args, "bc", None),
        "n_robots": getattr(args, "robots", None),
        "total_steps": getattr(args, "steps", None),
        "seed": getattr(args, "seed", None),
        "maps": getattr(args, "maps", None),
    }
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise SystemExit(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> ExperimentConfig:
    try:
        return load_config(args.config, **_overrides(args))
    except (ValueError, OSError) as e:
        raise SystemExit(f"config error: {e}")


def cmd_gen_maps(args) -> int:
    cfg = _config(args)
    seed = cfg.map_seed if args.map_seed is None else args.map_seed
    stream = {"train": 0, "eval": 1}[args.split]
    maps = generate_maps(cfg.scenario_config(), args.count, stream, seed)
    try:
        paths = write_maps(maps, args.out)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote {len(paths)} maps to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_kv_file(cfg, out / "config.txt")

    def progress(d):
        log.info("update %4d  steps %7d  return %8.2f  J_c %7.3f  kl %.4f  %s  success %.2f",
                 d["update"], d["timesteps"], d["avg_return"], d["J_c"], d["kl"], d["mode"], d["success"])

    ckpt = train(cfg, out, progress)
    print(f"checkpoint: {ckpt}\ndiagnostics: {out / DIAGNOSTICS}")
    return 0


def _eval_maps(args, cfg):
    if args.maps:
        return load_maps(args.maps)
    if cfg is None:
        raise SystemExit("--maps is required when the checkpoint has no embedded config")
    return evaluation_maps(cfg)


def _actor(args):
    """(ExperimentConfig or None, action function) for a checkpoint or the scripted expert."""
    if args.expert:
        cfg = _config(args)
        return cfg, expert_for(cfg).act
    if not args.checkpoint:
        raise SystemExit("give --checkpoint or --expert")
    try:
        cfg, policy, theta = load_policy(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise SystemExit(f"cannot load {args.checkpoint}: {e}")
    return cfg, lambda obs: policy.mean(theta, obs)


def cmd_eval(args) -> int:
    cfg, act = _actor(args)
    maps = _eval_maps(args, cfg)
    env_cfg = (cfg or ExperimentConfig()).env_config()
    report = evaluate_actor(act, maps, env_cfg, args.episodes_per_map)
    summary = {k: v for k, v in report.to_dict().items() if k != "outcomes"}
    print(json.dumps(summary, indent=1))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.save(args.out)
    return 0


def cmd_export_traj(args) -> int:
    cfg, act = _actor(args)
    world = WorldMap.load(args.map)
    env = NavEnv(world, (cfg or ExperimentConfig()).env_config())
    rec = TrajectoryRecorder()
    obs = env.reset()
    while not env.done:
        a = act(obs)
        rec.record(env, a, env.step(a))
        obs = env.observe_all()
    rec.write(args.out)
    print(f"{env.reason} after {env.t} steps; wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="connav", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--robots", type=int)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config field")

    g = sub.add_parser("gen-maps", help="write generated maps as JSON")
    common(g)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--map-seed", type=int)
    g.add_argument("--split", choices=["train", "eval"], default="train")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_maps)

    t = sub.add_parser("train", help="train a shared policy")
    common(t)
    t.add_argument("--algo", choices=["cpo", "trpo"])
    t.add_argument("--bc", type=_bool, metavar="on|off")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--maps", help="directory of training map JSON files")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate with mean actions"),
                                 ("export-traj", cmd_export_traj, "roll one map and write a trajectory CSV")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("--checkpoint")
        e.add_argument("--expert", action="store_true", help="use the scripted expert instead of a checkpoint")
        if name == "eval":
            e.add_argument("--maps", help="directory of map JSON files (default: held-out maps from the config)")
            e.add_argument("--episodes-per-map", type=int, default=1)
            e.add_argument("--out", help="EvalReport JSON path")
        else:
            e.add_argument("--map", required=True)
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

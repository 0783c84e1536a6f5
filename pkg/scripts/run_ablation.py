"""Train and evaluate the CPO+BC / TRPO+BC / CPO arms and print a comparison table.

    python scripts/run_ablation.py --out results/ablation [--config exp.txt] [--seeds 0 1 2]

Finished runs are reused, interrupted ones resume from their checkpoints.
"""
import argparse
import json
import logging

from connav.ablation import ARMS, run_ablation
from connav.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results/ablation")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", choices=list(ARMS))
    p.add_argument("--steps", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config, total_steps=args.steps)
    res = run_ablation(base, args.out, args.seeds, args.arms)
    print(f"{'arm':10s} {'success':>8s} {'connect':>8s} {'late J_c':>9s}")
    for arm, s in res["summary"].items():
        print(f"{arm:10s} {s['success_rate']:8.3f} {s['connectivity_rate']:8.3f} {s['late_J_c']:9.3f}")
    print(json.dumps(res["summary"], indent=1))


if __name__ == "__main__":
    main()

"""Run the unlearn-then-heal protocol and print the healing grid.

Splits off a backup pool, trains baseline and gold models, applies each
approximate unlearning method for the configured number of repetitions,
picks a representative damaged model per method, then heals it with every
replacement variant (remain-only, four twin metrics, random control) at two
epoch settings. Prints each cell's gap to the gold model in percentage
points.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from ulab.config import from_toml
from ulab.harness import run_healing_protocol


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True, help="experiment TOML")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument(
        "--methods", nargs="+", default=None, choices=("fisher", "influence"),
        help="unlearning methods to run (default: both)",
    )
    args = parser.parse_args()

    cfg = from_toml(Path(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)

    if args.methods:
        report = run_healing_protocol(cfg, methods=tuple(args.methods))
    else:
        report = run_healing_protocol(cfg)

    gold = next(r for r in report.records if r.stage == "gold")
    print(f"\ngold accuracy {gold.accuracy:.4f}")
    for r in report.records:
        if r.stage == "representative":
            flag = " (collapsed)" if r.extra.get("collapsed") else ""
            print(f"start [{r.method}] accuracy {r.accuracy:.4f}{flag}")

    print(f"\n{'start':<11} {'epochs':>6} {'variant':<26} {'acc':>7} {'vs gold (pp)':>13}")
    for r in report.records:
        if r.stage != "heal":
            continue
        parts = dict(p.split("=") for p in r.scenario.split(","))
        print(
            f"{parts['start']:<11} {parts['epochs']:>6} {r.method:<26} "
            f"{r.accuracy:>7.4f} {r.extra['delta_pp_vs_gold']:>+13.3f}"
        )

    print(f"\n{'start':<11} {'epochs':>6} {'best variant':<26} {'best acc':>9}")
    for g in report.groups:
        print(
            f"{g['start_method']:<11} {g['epochs']:>6} {g['best_variant']:<26} "
            f"{g['best_acc']:>9.4f}"
        )
    print(f"\nartifacts in {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

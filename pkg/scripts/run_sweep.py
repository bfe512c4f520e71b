"""Run the removal-fraction sweep and print the summary grid.

Trains the naive and SISA baselines, then unlearns each configured fraction
with all four methods (naive retrain, SISA, fisher, influence). Artifacts
(report.json, summary.csv, curves.csv, checkpoints, request files) land in
the configured output directory.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from ulab.config import from_toml
from ulab.harness import run_sweep
from ulab.report import summarize


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", required=True, help="experiment TOML")
    parser.add_argument("--seed", type=int, default=None, help="override master seed")
    parser.add_argument("--out", default=None, help="override output directory")
    args = parser.parse_args()

    cfg = from_toml(Path(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    report = run_sweep(cfg)

    print(f"\n{'stage':<10} {'method':<10} {'scenario':<16} {'mean acc':>9} {'std':>7}")
    for row in summarize(report.records):
        acc = "-" if row["mean_acc"] is None else f"{row['mean_acc']:.4f}"
        std = "-" if row["std_acc"] is None else f"{row['std_acc']:.4f}"
        print(
            f"{row['stage']:<10} {row['method']:<10} {row['scenario']:<16} "
            f"{acc:>9} {std:>7}"
        )
    print(f"\nartifacts in {cfg.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands mirror the pipeline stages: train, sisa-train, unlearn, attack,
heal, sweep, healing-protocol, report. Every run-producing subcommand takes
--config (TOML), --seed (overrides the file's master seed) and --out
(overrides the output directory). Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ExperimentConfig, from_toml
from .errors import UlabError
from .report import load_report, summarize, write_report


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ulab", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name: str, help_text: str, needs_config: bool = True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment TOML file")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="override the output directory")
        p.set_defaults(needs_config=needs_config)
        return p

    add("train", "train the baseline model")
    add("sisa-train", "train the sharded/sliced ensemble")
    unlearn = add("unlearn", "apply an unlearning method to adversary requests")
    unlearn.add_argument(
        "--method", choices=("naive", "sisa", "fisher", "influence"),
        help="override the configured unlearning method",
    )
    attack = add("attack", "generate an unlearn-request list")
    attack.add_argument(
        "--knowledge", choices=("blind", "output", "param"),
        help="override the configured adversary knowledge level",
    )
    add("heal", "unlearn once and run the healing grid")
    add("sweep", "removal-fraction sweep over all four methods")
    add("healing-protocol", "full repetition/representative/healing pipeline")
    add("report", "re-derive summary.csv and curves.csv from report.json",
        needs_config=False)
    return parser


_KNOWLEDGE = {"blind": "blind", "output": "output_aware", "param": "param_aware"}


def _load_config(parser: _Parser, args) -> ExperimentConfig:
    if not args.config:
        parser.error(f"{args.command} requires --config")
    path = Path(args.config)
    if not path.exists():
        parser.error(f"config file not found: {path}")
    cfg = from_toml(path)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _print_summary(report) -> None:
    for row in summarize(report.records):
        acc = "-" if row["mean_acc"] is None else f"{row['mean_acc']:.4f}"
        std = "" if not row["std_acc"] else f" +/- {row['std_acc']:.4f}"
        print(f"{row['stage']:<14} {row['method']:<26} {row['scenario']:<24} {acc}{std}")


def _run(parser: _Parser, args) -> int:
    if args.command == "report":
        out = Path(args.out) if args.out else None
        if out is None and args.config:
            out = Path(args.config).parent
        if out is None:
            parser.error("report needs --out pointing at a run directory")
        report_path = out / "report.json"
        if not report_path.exists():
            print(f"error: {report_path} not found", file=sys.stderr)
            return 2
        report = load_report(report_path)
        write_report(report, out)
        _print_summary(report)
        return 0

    cfg = _load_config(parser, args)
    if args.command == "unlearn" and args.method:
        cfg = replace(cfg, unlearn_method=args.method)
    if args.command == "attack" and args.knowledge:
        cfg = replace(cfg, adversary=replace(cfg.adversary, knowledge=_KNOWLEDGE[args.knowledge]))

    if args.command == "train":
        report = harness.run_train(cfg)
    elif args.command == "sisa-train":
        report = harness.run_sisa_train(cfg)
    elif args.command == "unlearn":
        report = harness.run_unlearn(cfg)
    elif args.command == "attack":
        path = harness.run_attack(cfg)
        print(f"wrote {path}")
        return 0
    elif args.command == "heal":
        report = harness.run_heal(cfg)
    elif args.command == "sweep":
        report = harness.run_sweep(cfg)
    elif args.command == "healing-protocol":
        report = harness.run_healing_protocol(cfg)
    else:  # pragma: no cover - argparse restricts the choices
        parser.error(f"unknown command {args.command!r}")
    _print_summary(report)
    print(f"report written to {cfg.out_dir}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _run(parser, args)
    except SystemExit:
        raise
    except UlabError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

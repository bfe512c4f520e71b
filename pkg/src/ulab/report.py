"""Run records, summaries and the report.json / CSV emitters.

A report is a flat list of per-stage records plus derived summary rows.
Summaries aggregate repetitions of the same cell (stage, method, scenario,
fraction): mean and population stddev of accuracy, mean wall time, and the
representative run, the one whose accuracy is closest to the mean with ties
going to the lowest run index. Wall-time fields are informational only and
are the single permitted difference between two reports from identical
seeded invocations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

SCHEMA_VERSION = 1

SUMMARY_HEADERS = [
    "stage",
    "method",
    "scenario",
    "mean_acc",
    "std_acc",
    "mean_time_s",
    "representative_run",
]
CURVES_HEADERS = ["method", "fraction", "accuracy", "wall_time_s"]


@dataclass
class RunRecord:
    stage: str
    method: str
    scenario: str = ""
    run_index: int = 0
    fraction: float | None = None
    accuracy: float | None = None
    wall_time_s: float = 0.0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_json(self) -> dict:
        return {
            "stage": self.stage,
            "method": self.method,
            "scenario": self.scenario,
            "run_index": self.run_index,
            "fraction": self.fraction,
            "accuracy": self.accuracy,
            "wall_time_s": round(self.wall_time_s, 3),
            "seed": self.seed,
            "extra": self.extra,
        }

    @staticmethod
    def from_json(obj: dict) -> "RunRecord":
        return RunRecord(
            stage=obj["stage"],
            method=obj["method"],
            scenario=obj.get("scenario", ""),
            run_index=obj.get("run_index", 0),
            fraction=obj.get("fraction"),
            accuracy=obj.get("accuracy"),
            wall_time_s=obj.get("wall_time_s", 0.0),
            seed=obj.get("seed", 0),
            extra=obj.get("extra", {}),
        )


@dataclass
class MetricsReport:
    config_digest: str = ""
    master_seed: int = 0
    records: list[RunRecord] = field(default_factory=list)
    groups: list[dict] = field(default_factory=list)
    schema: int = SCHEMA_VERSION

    def add(self, record: RunRecord) -> None:
        self.records.append(record)


def representative_index(accuracies: list[float]) -> int:
    """Position of the accuracy closest to the mean; ties -> lowest index."""
    if not accuracies:
        raise ValueError("no accuracies to choose a representative from")
    arr = np.asarray(accuracies, dtype=np.float64)
    return int(np.argmin(np.abs(arr - arr.mean())))


def summarize(records: list[RunRecord]) -> list[dict]:
    """One summary row per (stage, method, scenario, fraction) cell."""
    cells: dict[tuple, list[RunRecord]] = {}
    for r in records:
        cells.setdefault((r.stage, r.method, r.scenario, r.fraction), []).append(r)
    rows = []
    for (stage, method, scenario, fraction), group in cells.items():
        group = sorted(group, key=lambda r: r.run_index)
        accs = [r.accuracy for r in group if r.accuracy is not None]
        times = [r.wall_time_s for r in group]
        if accs:
            mean_acc = float(np.mean(accs))
            std_acc = float(np.std(accs))
            scored = [r for r in group if r.accuracy is not None]
            rep = scored[representative_index([r.accuracy for r in scored])].run_index
        else:
            mean_acc = None
            std_acc = None
            rep = None
        label = scenario if fraction is None else f"fraction={fraction:g}"
        rows.append(
            {
                "stage": stage,
                "method": method,
                "scenario": label,
                "mean_acc": mean_acc,
                "std_acc": std_acc,
                "mean_time_s": round(float(np.mean(times)), 3) if times else None,
                "representative_run": rep,
            }
        )
    return rows


def curve_rows(records: list[RunRecord]) -> list[dict]:
    """Accuracy/latency vs fraction rows (the sweep-figure analog)."""
    rows = []
    for r in records:
        if r.fraction is None or r.accuracy is None:
            continue
        rows.append(
            {
                "method": r.method,
                "fraction": r.fraction,
                "accuracy": r.accuracy,
                "wall_time_s": round(r.wall_time_s, 3),
            }
        )
    rows.sort(key=lambda row: (row["method"], row["fraction"]))
    return rows


def report_to_json(r: MetricsReport) -> dict:
    return {
        "schema": r.schema,
        "config_digest": r.config_digest,
        "master_seed": r.master_seed,
        "records": [rec.to_json() for rec in r.records],
        "groups": r.groups,
        "summary": summarize(r.records),
    }


def report_from_json(obj: dict) -> MetricsReport:
    schema = obj.get("schema", SCHEMA_VERSION)
    if schema != SCHEMA_VERSION:
        raise FormatError(f"unsupported report schema {schema}")
    return MetricsReport(
        config_digest=obj.get("config_digest", ""),
        master_seed=obj.get("master_seed", 0),
        records=[RunRecord.from_json(o) for o in obj.get("records", [])],
        groups=obj.get("groups", []),
        schema=obj.get("schema", SCHEMA_VERSION),
    )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report(r: MetricsReport, directory) -> dict[str, Path]:
    """Emit report.json, summary.csv and curves.csv into the directory."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": root / "report.json",
        "summary": root / "summary.csv",
        "curves": root / "curves.csv",
    }
    try:
        paths["report"].write_text(json.dumps(report_to_json(r), indent=2) + "\n")
        with open(paths["summary"], "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(SUMMARY_HEADERS)
            for row in summarize(r.records):
                writer.writerow([_cell(row[h]) for h in SUMMARY_HEADERS])
        with open(paths["curves"], "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CURVES_HEADERS)
            for row in curve_rows(r.records):
                writer.writerow([_cell(row[h]) for h in CURVES_HEADERS])
    except OSError as e:
        raise OSError(f"failed writing report under {root}: {e}") from e
    return paths


def load_report(path) -> MetricsReport:
    return report_from_json(json.loads(Path(path).read_text()))

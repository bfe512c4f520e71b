"""Unlearn-request generators at three knowledge levels.

Blind adversaries sample uniformly (optionally within one class), output-aware
adversaries pick the samples the model is least confident about (lowest
true-class logit), and parameter-aware adversaries greedily pick the samples
whose single-point influence on the parameters is largest,
score(z) = ||(H + eps I)^-1 grad L(z)||_2. All generators are deterministic
for a fixed seed and return distinct ids present in the dataset, so the
downstream hash-checked removal never trips on them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._util import mix_seed
from .approx import InfluenceConfig, cg_inverse_hvp, lissa_inverse_hvp
from .dataset import Dataset
from .model import ModelState, grad
from .model import _forward

BLIND = "blind"
OUTPUT_AWARE = "output_aware"
PARAM_AWARE = "param_aware"


@dataclass(frozen=True)
class AdversaryConfig:
    knowledge: str = BLIND
    budget: int | float = 25
    target_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.knowledge not in (BLIND, OUTPUT_AWARE, PARAM_AWARE):
            raise ValueError(f"unknown knowledge level {self.knowledge!r}")
        if isinstance(self.budget, bool) or (
            isinstance(self.budget, int) and self.budget < 1
        ):
            raise ValueError("count budget must be a positive integer")
        if isinstance(self.budget, float) and not 0.0 < self.budget <= 1.0:
            raise ValueError("fraction budget must lie in (0, 1]")
        if self.target_class is not None and self.target_class < 0:
            raise ValueError("target_class must be >= 0")


def _eligible_indices(d: Dataset, cfg: AdversaryConfig) -> list[int]:
    if cfg.target_class is None:
        return list(range(len(d)))
    if cfg.target_class >= d.num_classes:
        raise ValueError(
            f"target_class {cfg.target_class} outside [0, {d.num_classes})"
        )
    return [i for i, s in enumerate(d.samples) if s.label == cfg.target_class]


def _budget_count(cfg: AdversaryConfig, d: Dataset, eligible: list[int]) -> int:
    # a float budget is a fraction of the whole dataset, an int is a count
    if isinstance(cfg.budget, float):
        count = int(round(cfg.budget * len(d)))
    else:
        count = cfg.budget
    if count < 1:
        raise ValueError(f"budget {cfg.budget!r} resolves to zero requests")
    if count > len(eligible):
        scope = (
            f"class {cfg.target_class} size {len(eligible)}"
            if cfg.target_class is not None
            else f"dataset size {len(eligible)}"
        )
        raise ValueError(f"budget {count} exceeds {scope}")
    return count


def requests_blind(d: Dataset, cfg: AdversaryConfig) -> list[int]:
    """Seeded uniform sample without replacement, optionally class-targeted."""
    eligible = _eligible_indices(d, cfg)
    count = _budget_count(cfg, d, eligible)
    rng = np.random.default_rng(mix_seed(cfg.seed, "blind"))
    picks = rng.choice(len(eligible), size=count, replace=False)
    return [d.samples[eligible[int(i)]].id for i in picks]


def output_aware_scores(d: Dataset, m: ModelState) -> np.ndarray:
    """True-class logit per sample (lower = more attractive to remove)."""
    if d.feature_dim != m.arch.feature_dim:
        raise ValueError("dataset dimension does not match the model")
    Z, _, _ = _forward(m.arch, m.theta, d.features)
    return Z[np.arange(len(d)), d.labels]


def requests_output_aware(d: Dataset, m: ModelState, cfg: AdversaryConfig) -> list[int]:
    """The budget samples with the lowest true-class logits, ties by id."""
    eligible = _eligible_indices(d, cfg)
    count = _budget_count(cfg, d, eligible)
    logits = output_aware_scores(d, m)
    ranked = sorted(eligible, key=lambda i: (logits[i], d.samples[i].id))
    return [d.samples[i].id for i in ranked[:count]]


def param_aware_scores(
    d: Dataset, m: ModelState, solver: InfluenceConfig
) -> np.ndarray:
    """Per-sample influence magnitude ||(H + eps I)^-1 grad L(z)||_2.

    H is the loss Hessian over the full dataset; one damped solve per sample
    through the configured inverse-HVP solver.
    """
    if d.feature_dim != m.arch.feature_dim:
        raise ValueError("dataset dimension does not match the model")
    solve = lissa_inverse_hvp if solver.solver == "lissa" else cg_inverse_hvp
    scores = np.empty(len(d))
    for i in range(len(d)):
        g = grad(m, d.select([i]), ridge=solver.ridge)
        scores[i] = float(np.linalg.norm(solve(m, d, g, solver)))
    return scores


def requests_param_aware(
    d: Dataset, m: ModelState, cfg: AdversaryConfig, solver: InfluenceConfig
) -> list[int]:
    """Top-budget samples by influence-norm score, ties by id ascending."""
    eligible = _eligible_indices(d, cfg)
    count = _budget_count(cfg, d, eligible)
    scores = param_aware_scores(d, m, solver)
    ranked = sorted(eligible, key=lambda i: (-scores[i], d.samples[i].id))
    return [d.samples[i].id for i in ranked[:count]]


def generate_requests(
    d: Dataset,
    cfg: AdversaryConfig,
    m: ModelState | None = None,
    solver: InfluenceConfig | None = None,
) -> list[int]:
    """Dispatch on knowledge level, enforcing the access preconditions."""
    if cfg.knowledge == BLIND:
        return requests_blind(d, cfg)
    if m is None:
        raise ValueError(f"{cfg.knowledge} adversary needs model access")
    if cfg.knowledge == OUTPUT_AWARE:
        return requests_output_aware(d, m, cfg)
    return requests_param_aware(d, m, cfg, solver or InfluenceConfig(solver="cg"))


def save_requests(
    ids: list[int],
    cfg: AdversaryConfig,
    path,
    scores: dict[int, float] | None = None,
) -> None:
    """JSON export of a request list with its generator metadata."""
    payload = {
        "knowledge": cfg.knowledge,
        "budget": cfg.budget,
        "target_class": cfg.target_class,
        "seed": cfg.seed,
        "ids": [f"{sid:#018x}" for sid in ids],
        "scores": (
            {f"{sid:#018x}": scores[sid] for sid in ids if sid in scores}
            if scores
            else None
        ),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_requests(path) -> tuple[list[int], dict]:
    payload = json.loads(Path(path).read_text())
    ids = [int(s, 16) for s in payload["ids"]]
    meta = {k: v for k, v in payload.items() if k != "ids"}
    return ids, meta

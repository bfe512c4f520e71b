"""Similarity metrics, spare-set healing (Algorithm-1 style) and twin search.

All metrics follow one contract: smaller means more similar. Cosine
similarity is therefore exposed as the distance 1 - cos. Mahalanobis uses a
shrunk covariance Sigma' = (1-lambda)*Sigma + lambda*tr(Sigma)/d*I so it
stays invertible on small remaining sets.

The spare set is a consumable pool of real held-out samples: a selection
within the distance threshold removes the chosen element permanently.
Twins are precomputed per-sample surrogate lists (up to q nearest within
delta). Healing itself is a short fine-tune on the remaining data plus the
chosen replacements.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._util import mix_seed
from .dataset import Dataset, Sample
from .errors import (
    CovarianceError,
    InvalidReplacementError,
    UndefinedSimilarityError,
)
from .model import ModelState, TrainConfig, embed_batch, train

RAW = "raw"
FEATURE = "feature"

L2 = "l2"
COSINE = "cosine"
MAHALANOBIS = "mahalanobis"

RESERVED_FROM_TRAIN = "reserved_from_train"
BACKUP_SPLIT = "backup_split"


@dataclass(frozen=True)
class MetricSpec:
    space: str = RAW
    kind: str = L2
    shrinkage: float = 0.1
    covariance: np.ndarray | None = None

    def __post_init__(self):
        if self.space not in (RAW, FEATURE):
            raise ValueError(f"unknown space {self.space!r}")
        if self.kind not in (L2, COSINE, MAHALANOBIS):
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.kind == COSINE and self.space != FEATURE:
            raise ValueError("cosine distance is defined on the feature space only")
        if not 0.0 <= self.shrinkage <= 1.0:
            raise ValueError("shrinkage must lie in [0, 1]")

    def label(self) -> str:
        return f"{self.space}-{self.kind}"


def _embed_rows(X: np.ndarray, samples, spec: MetricSpec, m: ModelState | None):
    if spec.space == RAW:
        return X
    if m is None:
        raise ValueError("feature-space metrics need a model")
    d = Dataset(list(samples), m.arch.num_classes, m.arch.feature_dim)
    return embed_batch(m, d)


def _embed_samples(samples, spec: MetricSpec, m: ModelState | None) -> np.ndarray:
    samples = list(samples)
    X = np.stack([s.features for s in samples])
    return _embed_rows(X, samples, spec, m)


def fit_covariance(d_r: Dataset, space: str = RAW, m: ModelState | None = None):
    """Unbiased sample covariance of raw features or model embeddings."""
    if len(d_r) < 2:
        raise ValueError("covariance needs at least 2 samples")
    U = _embed_samples(d_r.samples, MetricSpec(space=space, kind=L2), m)
    return np.atleast_2d(np.cov(U, rowvar=False, ddof=1))


def prepare_metric(
    spec: MetricSpec, d_r: Dataset | None = None, m: ModelState | None = None
) -> MetricSpec:
    """Fit a covariance into the metric spec when the kind needs one."""
    if spec.kind != MAHALANOBIS or spec.covariance is not None:
        return spec
    if d_r is None:
        raise CovarianceError("mahalanobis metric needs a dataset to fit covariance")
    return replace(spec, covariance=fit_covariance(d_r, spec.space, m))


def _shrunk_covariance(spec: MetricSpec) -> np.ndarray:
    if spec.covariance is None:
        raise CovarianceError("mahalanobis covariance has not been fitted")
    sigma = np.asarray(spec.covariance, dtype=np.float64)
    d = sigma.shape[0]
    trace = float(np.trace(sigma))
    # zero-trace covariance (all points identical) falls back to the identity
    # target so the shrunk matrix is still invertible
    target = (trace / d if trace > 0 else 1.0) * np.eye(d)
    return (1.0 - spec.shrinkage) * sigma + spec.shrinkage * target


def _whitener(spec: MetricSpec) -> np.ndarray:
    """Cholesky factor L of the shrunk covariance; distances whiten by L^-1."""
    sigma = _shrunk_covariance(spec)
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise CovarianceError(
            "shrunk covariance is singular; increase shrinkage"
        ) from None


def _pairwise_l2(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * A @ B.T
    )
    return np.sqrt(np.maximum(sq, 0.0))


def pairwise_distances(
    a_samples, b_samples, spec: MetricSpec, m: ModelState | None = None
) -> np.ndarray:
    """Distance matrix between two sample collections under the metric."""
    A = _embed_samples(a_samples, spec, m)
    B = _embed_samples(b_samples, spec, m)
    if spec.kind == L2:
        return _pairwise_l2(A, B)
    if spec.kind == COSINE:
        na = np.linalg.norm(A, axis=1)
        nb = np.linalg.norm(B, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise UndefinedSimilarityError(
                "cosine distance is undefined for a zero-norm embedding"
            )
        return 1.0 - (A / na[:, None]) @ (B / nb[:, None]).T
    L = _whitener(spec)
    Aw = np.linalg.solve(L, A.T).T
    Bw = np.linalg.solve(L, B.T).T
    return _pairwise_l2(Aw, Bw)


def distance(
    a: Sample, b: Sample, spec: MetricSpec, m: ModelState | None = None
) -> float:
    """Scalar distance between two samples under the metric spec."""
    return float(pairwise_distances([a], [b], spec, m)[0, 0])


# ---------------------------------------------------------------------------
# spare set (Algorithm 1)


@dataclass
class SpareSet:
    """Consumable pool of healing surrogates; consumed ids never return."""

    pool: list[Sample]
    origin: str
    consumed: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.origin not in (RESERVED_FROM_TRAIN, BACKUP_SPLIT):
            raise ValueError(f"unknown spare origin {self.origin!r}")
        overlap = {s.id for s in self.pool} & set(self.consumed)
        if overlap:
            raise ValueError("pool and consumed ids overlap")

    def pool_ids(self) -> list[int]:
        return [s.id for s in self.pool]


def reserve_spare(d: Dataset, count_k: int, seed: int = 0) -> tuple[Dataset, SpareSet]:
    """Reserve count_k seeded-uniform spares; training uses the complement."""
    if count_k < 0:
        raise ValueError("count_k must be >= 0")
    if count_k >= len(d):
        raise ValueError(f"count_k={count_k} must be < |d|={len(d)}")
    rng = np.random.default_rng(mix_seed(seed, "spare"))
    chosen = rng.choice(len(d), size=count_k, replace=False)
    chosen_set = set(int(i) for i in chosen)
    pool = [d.samples[i] for i in sorted(chosen_set)]
    remain = d.select([i for i in range(len(d)) if i not in chosen_set])
    return remain, SpareSet(pool=pool, origin=RESERVED_FROM_TRAIN)


def spare_from_backup(backup: Dataset) -> SpareSet:
    return SpareSet(pool=list(backup.samples), origin=BACKUP_SPLIT)


def default_delta(
    pool: SpareSet | list[Sample],
    spec: MetricSpec,
    m: ModelState | None = None,
    seed: int = 0,
) -> float:
    """Scale-adaptive threshold: 10th percentile of distances from a seeded
    probe pool member to every other pool member."""
    samples = pool.pool if isinstance(pool, SpareSet) else list(pool)
    if len(samples) < 2:
        raise ValueError("need at least 2 pool samples to calibrate delta")
    rng = np.random.default_rng(mix_seed(seed, "delta-probe"))
    probe = int(rng.integers(len(samples)))
    others = [s for i, s in enumerate(samples) if i != probe]
    dists = pairwise_distances([samples[probe]], others, spec, m)[0]
    return float(np.percentile(dists, 10))


def select_spare(
    z: Sample,
    pool: SpareSet,
    spec: MetricSpec,
    delta: float,
    m: ModelState | None = None,
    seed: int = 0,
) -> Sample | None:
    """Nearest pool element to z, consumed if strictly within delta.

    Argmin ties are broken uniformly at random (seeded). Returns None on an
    empty pool or when the nearest candidate is at distance >= delta; the
    pool is left untouched in both cases.
    """
    if not pool.pool:
        return None
    dists = pairwise_distances([z], pool.pool, spec, m)[0]
    best = float(np.min(dists))
    ties = np.flatnonzero(dists == best)
    rng = np.random.default_rng(mix_seed(seed, "spare-tie"))
    pick = int(ties[rng.integers(len(ties))])
    if not best < delta:
        return None
    chosen = pool.pool.pop(pick)
    pool.consumed.append(chosen.id)
    return chosen


def save_spare_manifest(s: SpareSet, path) -> None:
    manifest = {
        "origin": s.origin,
        "pool": [f"{sid:#018x}" for sid in s.pool_ids()],
        "consumed": [f"{sid:#018x}" for sid in s.consumed],
    }
    Path(path).write_text(json.dumps(manifest, indent=2))


# ---------------------------------------------------------------------------
# twins


@dataclass
class TwinIndex:
    """Per-sample surrogate lists: up to q nearest candidates within delta."""

    delta: float
    entries: dict[int, list[tuple[int, float]]]
    metric: MetricSpec

    def unmatched(self) -> list[int]:
        return [pid for pid, twins in self.entries.items() if not twins]

    def surrogates_for(self, protected_id: int) -> list[int]:
        return [sid for sid, _ in self.entries.get(protected_id, [])]

    def all_surrogate_ids(self) -> list[int]:
        seen: dict[int, None] = {}
        for twins in self.entries.values():
            for sid, _ in twins:
                seen.setdefault(sid, None)
        return list(seen)


def build_twin_index(
    protected: Dataset,
    candidates: Dataset,
    spec: MetricSpec,
    delta: float,
    q: int = 1,
    m: ModelState | None = None,
) -> TwinIndex:
    """Exhaustive q-nearest-within-delta scan, candidates disjoint by id."""
    if q < 1:
        raise ValueError("q must be >= 1")
    overlap = protected.id_set() & candidates.id_set()
    if overlap:
        raise ValueError(
            f"candidates must be disjoint from protected ids, got {len(overlap)} shared"
        )
    entries: dict[int, list[tuple[int, float]]] = {}
    if len(candidates) == 0:
        return TwinIndex(delta=delta, entries={s.id: [] for s in protected}, metric=spec)
    D = pairwise_distances(protected.samples, candidates.samples, spec, m)
    for row, s in enumerate(protected.samples):
        order = np.argsort(D[row], kind="stable")
        twins: list[tuple[int, float]] = []
        for col in order:
            dist = float(D[row, col])
            if dist > delta:
                break
            twins.append((candidates.samples[col].id, dist))
            if len(twins) == q:
                break
        entries[s.id] = twins
    return TwinIndex(delta=delta, entries=entries, metric=spec)


def save_twin_csv(t: TwinIndex, path) -> None:
    with open(Path(path), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["protected_id", "rank", "surrogate_id", "distance", "metric", "delta"]
        )
        for pid, twins in t.entries.items():
            for rank, (sid, dist) in enumerate(twins):
                writer.writerow(
                    [f"{pid:#018x}", rank, f"{sid:#018x}", repr(dist),
                     t.metric.label(), repr(float(t.delta))]
                )


# ---------------------------------------------------------------------------
# healing fine-tune


REMAIN_ONLY = "remain_only"
REMAIN_PLUS_TWINS = "remain_plus_twins"
REMAIN_PLUS_RANDOM = "remain_plus_random"


@dataclass(frozen=True)
class HealConfig:
    data_mode: str = REMAIN_ONLY
    epochs: int = 1
    train_cfg: TrainConfig = TrainConfig(epochs=1, learning_rate=1e-3, optimizer="adam")

    def __post_init__(self):
        if self.data_mode not in (REMAIN_ONLY, REMAIN_PLUS_TWINS, REMAIN_PLUS_RANDOM):
            raise ValueError(f"unknown data_mode {self.data_mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def draw_random_replacements(
    candidates: Dataset, count: int, seed: int = 0
) -> list[Sample]:
    """Seeded uniform draw from the candidate pool (the random control arm)."""
    if count > len(candidates):
        raise ValueError(f"cannot draw {count} from {len(candidates)} candidates")
    rng = np.random.default_rng(mix_seed(seed, "random-replacements"))
    idx = rng.choice(len(candidates), size=count, replace=False)
    return [candidates.samples[int(i)] for i in idx]


def heal(
    m_unlearned: ModelState,
    d_r: Dataset,
    replacements: list[Sample] | None,
    cfg: HealConfig,
) -> ModelState:
    """Fine-tune the unlearned model on d_r plus the replacement samples.

    Replacement ids must be distinct and absent from d_r. An empty
    replacement list under a plus-replacements mode degrades to remain-only
    with a warning rather than failing.
    """
    replacements = list(replacements or [])
    if cfg.data_mode == REMAIN_ONLY:
        replacements = []
    elif not replacements:
        warnings.warn(
            f"{cfg.data_mode} healing got no replacements; running remain-only",
            RuntimeWarning,
        )
    data = healing_union(d_r, replacements)
    train_cfg = replace(cfg.train_cfg, epochs=cfg.epochs)
    return train(m_unlearned, data, train_cfg)


def healing_union(d_r: Dataset, replacements: list[Sample]) -> Dataset:
    """The fine-tuning set d_r + replacements, rejecting id collisions."""
    present = d_r.id_set()
    seen: set[int] = set()
    for s in replacements:
        if s.id in present:
            raise InvalidReplacementError(
                f"replacement {s.id:#018x} is already in the remaining data"
            )
        if s.id in seen:
            raise InvalidReplacementError(f"duplicate replacement {s.id:#018x}")
        seen.add(s.id)
    return Dataset(list(d_r.samples) + replacements, d_r.num_classes, d_r.feature_dim)

"""Exact unlearning: naive retraining and the SISA sharded/sliced ensemble.

SISA partitions the training set into k shards (trained independently) and
each shard into s slices (trained incrementally with a checkpoint after each
slice). Deleting a sample only invalidates its shard from the slice that
contained it onward, so unlearning resumes from the last clean checkpoint
instead of retraining everything. Inference is a majority vote.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._util import mix_seed, thread_count
from .dataset import Dataset, Sample, load_csv, save_csv
from .errors import FormatError, MembershipError, NoVotersError
from .model import (
    Architecture,
    ModelState,
    TrainConfig,
    init,
    load_model,
    save_model,
    train,
)
from .model import _forward

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


def train_gold(d_r: Dataset, arch: Architecture, cfg: TrainConfig) -> ModelState:
    """Retrain from scratch on the surviving data for the full epoch budget."""
    if len(d_r) == 0:
        raise ValueError("cannot retrain on an empty dataset")
    seed = mix_seed(cfg.seed, "gold")
    m0 = init(arch, seed=seed)
    return train(m0, d_r, replace(cfg, seed=seed))


@dataclass(frozen=True)
class SisaConfig:
    num_shards: int = 3
    num_slices: int = 5
    train_cfg: TrainConfig = TrainConfig(epochs=10)
    seed: int = 0

    def __post_init__(self):
        if self.num_shards < 1 or self.num_slices < 1:
            raise ValueError("num_shards and num_slices must be >= 1")

    @property
    def epochs_per_slice(self) -> int:
        # ceil(N/s): total epoch budget per shard stays close to N
        return math.ceil(self.train_cfg.epochs / self.num_slices)


@dataclass
class SisaEnsemble:
    """Sharded/sliced model collection plus everything needed to retrain it.

    slice_ids keeps the dealt sample order per (shard, slice); replaying a
    shard from any checkpoint walks the same order, which is what makes
    unlearning bit-identical to a fresh partial retrain.
    """

    arch: Architecture
    cfg: SisaConfig
    slice_ids: list[list[list[int]]]
    slice_checkpoints: list[list[ModelState]]
    data: Dataset
    empty_shards: frozenset[int] = frozenset()

    @property
    def shard_models(self) -> list[ModelState]:
        return [cps[-1] for cps in self.slice_checkpoints]

    def assignment(self) -> dict[int, tuple[int, int]]:
        out: dict[int, tuple[int, int]] = {}
        for i, shard in enumerate(self.slice_ids):
            for j, ids in enumerate(shard):
                for sid in ids:
                    out[sid] = (i, j)
        return out

    def active_shards(self) -> list[int]:
        return [i for i in range(self.cfg.num_shards) if i not in self.empty_shards]


def _shard_init(arch: Architecture, cfg: SisaConfig, shard: int) -> ModelState:
    return init(arch, seed=mix_seed(cfg.seed, "shard-init", shard))


def _slice_train_cfg(cfg: SisaConfig, shard: int, slice_j: int) -> TrainConfig:
    return replace(
        cfg.train_cfg,
        epochs=cfg.epochs_per_slice,
        seed=mix_seed(cfg.seed, "slice-train", shard, slice_j),
    )


def _subset(by_id: dict[int, Sample], ids, template: Dataset) -> Dataset:
    return Dataset(
        [by_id[i] for i in ids],
        num_classes=template.num_classes,
        feature_dim=template.feature_dim,
    )


def _train_shard(
    arch: Architecture,
    cfg: SisaConfig,
    shard: int,
    slices: list[list[int]],
    by_id: dict[int, Sample],
    template: Dataset,
    start_state: ModelState | None = None,
    start_slice: int = 0,
) -> list[ModelState]:
    """Checkpoints for slices start_slice..s-1, resuming from start_state."""
    state = start_state if start_state is not None else _shard_init(arch, cfg, shard)
    cumulative: list[int] = [sid for js in slices[:start_slice] for sid in js]
    checkpoints = []
    for j in range(start_slice, cfg.num_slices):
        cumulative = cumulative + slices[j]
        if cumulative:
            state = train(
                state, _subset(by_id, cumulative, template), _slice_train_cfg(cfg, shard, j)
            )
        checkpoints.append(state)
    return checkpoints


def _map_shards(fn, shards):
    workers = min(thread_count(), len(shards))
    if workers <= 1:
        return [fn(i) for i in shards]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, shards))


def sisa_train(d: Dataset, arch: Architecture, cfg: SisaConfig) -> SisaEnsemble:
    """Deal samples round-robin to shards and slices, then train incrementally.

    The dealing order comes from one seeded permutation, so shard and slice
    sizes differ by at most one and the partition is reproducible.
    """
    k, s = cfg.num_shards, cfg.num_slices
    if len(d) < k:
        raise ValueError(f"need at least {k} samples to fill {k} shards, got {len(d)}")
    rng = np.random.default_rng(mix_seed(cfg.seed, "partition"))
    perm = rng.permutation(len(d))
    slice_ids: list[list[list[int]]] = [[[] for _ in range(s)] for _ in range(k)]
    shard_counts = [0] * k
    for t, pos in enumerate(perm):
        shard = t % k
        slice_ids[shard][shard_counts[shard] % s].append(d.samples[pos].id)
        shard_counts[shard] += 1
    by_id = {smp.id: smp for smp in d.samples}

    def build(i: int) -> list[ModelState]:
        return _train_shard(arch, cfg, i, slice_ids[i], by_id, d)

    checkpoints = _map_shards(build, range(k))
    return SisaEnsemble(
        arch=arch, cfg=cfg, slice_ids=slice_ids, slice_checkpoints=checkpoints, data=d
    )


def _shard_votes(e: SisaEnsemble, X: np.ndarray) -> np.ndarray:
    """Per-shard argmax predictions, shape (active_shards, n)."""
    votes = []
    for i in e.active_shards():
        Z, _, _ = _forward(e.arch, e.slice_checkpoints[i][-1].theta, X)
        votes.append(np.argmax(Z, axis=1))
    return np.array(votes)


def sisa_predict(e: SisaEnsemble, sample: Sample) -> int:
    """Majority vote over non-empty shards; ties go to the lowest class index."""
    if sample.features.shape != (e.arch.feature_dim,):
        raise ValueError("sample dimension does not match the ensemble")
    if not e.active_shards():
        raise NoVotersError("all shards are empty, no model can vote")
    votes = _shard_votes(e, sample.features[None, :])[:, 0]
    counts = np.bincount(votes, minlength=e.arch.num_classes)
    return int(np.argmax(counts))


def sisa_accuracy(e: SisaEnsemble, d: Dataset) -> float:
    if len(d) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    if not e.active_shards():
        raise NoVotersError("all shards are empty, no model can vote")
    votes = _shard_votes(e, d.features)
    n = votes.shape[1]
    pred = np.empty(n, dtype=np.int64)
    for col in range(n):
        counts = np.bincount(votes[:, col], minlength=e.arch.num_classes)
        pred[col] = np.argmax(counts)
    return float(np.mean(pred == d.labels))


def sisa_unlearn(e: SisaEnsemble, ids) -> SisaEnsemble:
    """Remove the given sample ids and partially retrain only affected shards.

    Every deleted id must be assigned in the ensemble (hash membership check).
    Unaffected shards keep bit-identical parameters; an affected shard resumes
    from the checkpoint before its earliest affected slice with the deleted
    samples dropped from that slice onward. A shard left without data is
    flagged empty and abstains from voting.
    """
    ids = list(ids)
    assignment = e.assignment()
    for sid in ids:
        if sid not in assignment:
            raise MembershipError(sid)
    if not ids:
        return e
    doomed = set(ids)
    by_id = {smp.id: smp for smp in e.data.samples}
    survivors = [smp for smp in e.data.samples if smp.id not in doomed]
    new_data = Dataset(survivors, e.data.num_classes, e.data.feature_dim)

    new_slice_ids: list[list[list[int]]] = []
    retrain_plan: list[tuple[int, int]] = []
    for i, shard in enumerate(e.slice_ids):
        affected = [j for j, js in enumerate(shard) if any(s in doomed for s in js)]
        new_slice_ids.append([[s for s in js if s not in doomed] for js in shard])
        if affected:
            retrain_plan.append((i, min(affected)))

    new_checkpoints = [list(cps) for cps in e.slice_checkpoints]
    empty = set(e.empty_shards)

    def rebuild(plan: tuple[int, int]) -> tuple[int, int, list[ModelState]]:
        i, first = plan
        start = e.slice_checkpoints[i][first - 1] if first > 0 else None
        tail = _train_shard(
            e.arch, e.cfg, i, new_slice_ids[i], by_id, e.data,
            start_state=start, start_slice=first,
        )
        return i, first, tail

    for i, first, tail in _map_shards(rebuild, retrain_plan):
        new_checkpoints[i][first:] = tail
        if not any(new_slice_ids[i]):
            empty.add(i)

    return SisaEnsemble(
        arch=e.arch,
        cfg=e.cfg,
        slice_ids=new_slice_ids,
        slice_checkpoints=new_checkpoints,
        data=new_data,
        empty_shards=frozenset(empty),
    )


# ---------------------------------------------------------------------------
# on-disk layout: shard_<i>/slice_<j>.ulck + manifest.json + data.csv


def _train_cfg_to_json(cfg: TrainConfig) -> dict:
    return {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "batch_size": cfg.batch_size,
        "optimizer": cfg.optimizer,
        "adam_betas": list(cfg.adam_betas),
        "adam_eps": cfg.adam_eps,
        "ridge": cfg.ridge,
        "seed": cfg.seed,
    }


def _train_cfg_from_json(obj: dict) -> TrainConfig:
    return TrainConfig(
        epochs=obj["epochs"],
        learning_rate=obj["learning_rate"],
        batch_size=obj["batch_size"],
        optimizer=obj["optimizer"],
        adam_betas=tuple(obj["adam_betas"]),
        adam_eps=obj["adam_eps"],
        ridge=obj["ridge"],
        seed=obj["seed"],
    )


def arch_to_json(arch: Architecture) -> dict:
    return {
        "kind": arch.kind,
        "feature_dim": arch.feature_dim,
        "num_classes": arch.num_classes,
        "hidden_dim": arch.hidden_dim,
        "activation": arch.activation,
    }


def arch_from_json(obj: dict) -> Architecture:
    return Architecture(
        kind=obj["kind"],
        feature_dim=obj["feature_dim"],
        num_classes=obj["num_classes"],
        hidden_dim=obj.get("hidden_dim", 0),
        activation=obj.get("activation", "relu"),
    )


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_ensemble(e: SisaEnsemble, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    digests: dict[str, str] = {}
    for i, cps in enumerate(e.slice_checkpoints):
        shard_dir = root / f"shard_{i}"
        shard_dir.mkdir(exist_ok=True)
        for j, state in enumerate(cps):
            rel = f"shard_{i}/slice_{j}.ulck"
            save_model(state, root / rel)
            digests[rel] = file_digest(root / rel)
    save_csv(e.data, root / "data.csv")
    manifest = {
        "version": MANIFEST_VERSION,
        "num_shards": e.cfg.num_shards,
        "num_slices": e.cfg.num_slices,
        "seed": e.cfg.seed,
        "train_cfg": _train_cfg_to_json(e.cfg.train_cfg),
        "arch": arch_to_json(e.arch),
        "slice_ids": [
            [[f"{sid:#018x}" for sid in js] for js in shard] for shard in e.slice_ids
        ],
        "empty_shards": sorted(e.empty_shards),
        "data_file": "data.csv",
        "checkpoints": digests,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def load_ensemble(directory) -> SisaEnsemble:
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FormatError(f"{manifest_path}: ensemble manifest not found")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported manifest version")
    for rel, want in manifest["checkpoints"].items():
        got = file_digest(root / rel)
        if got != want:
            raise FormatError(f"{root / rel}: digest mismatch, checkpoint is corrupt")
    cfg = SisaConfig(
        num_shards=manifest["num_shards"],
        num_slices=manifest["num_slices"],
        train_cfg=_train_cfg_from_json(manifest["train_cfg"]),
        seed=manifest["seed"],
    )
    arch = arch_from_json(manifest["arch"])
    slice_ids = [
        [[int(sid, 16) for sid in js] for js in shard]
        for shard in manifest["slice_ids"]
    ]
    checkpoints = [
        [load_model(root / f"shard_{i}/slice_{j}.ulck") for j in range(cfg.num_slices)]
        for i in range(cfg.num_shards)
    ]
    data = load_csv(root / manifest["data_file"])
    # class count can shrink when unlearning wipes out a class; keep the arch's view
    if data.num_classes != arch.num_classes:
        data = Dataset(data.samples, arch.num_classes, data.feature_dim)
    return SisaEnsemble(
        arch=arch,
        cfg=cfg,
        slice_ids=slice_ids,
        slice_checkpoints=checkpoints,
        data=data,
        empty_shards=frozenset(manifest["empty_shards"]),
    )

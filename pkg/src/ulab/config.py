"""Experiment configuration: TOML file -> typed config tree.

One file describes a whole run: data source, architecture, training budget,
unlearning method settings, adversary, healing grid and output location.
Every section is optional and falls back to desk-scale defaults (blobs with
10 classes x 500 samples, dim 20, logistic model).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .adversary import AdversaryConfig
from .approx import FisherConfig, InfluenceConfig
from .exact import SisaConfig
from .model import TrainConfig


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "blobs"
    num_classes: int = 10
    per_class: int = 500
    feature_dim: int = 20
    spread: float = 0.35
    class_distance: float = 2.0
    path: str | None = None
    label_column: str = "label"
    images: str | None = None
    labels: str | None = None
    limit: int | None = None

    def __post_init__(self):
        if self.source not in ("blobs", "csv", "idx"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source == "csv" and not self.path:
            raise ValueError("csv dataset needs path")
        if self.source == "idx" and not (self.images and self.labels):
            raise ValueError("idx dataset needs images and labels paths")


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic"
    hidden_dim: int = 32
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")


@dataclass(frozen=True)
class HealingSpec:
    enabled: bool = True
    targets: int = 25
    delta: float = math.inf
    q: int = 1
    shrinkage: float = 0.1
    include_random_control: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.targets < 1:
            raise ValueError("targets must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.q < 1:
            raise ValueError("q must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    model: ModelSpec = ModelSpec()
    train_cfg: TrainConfig = TrainConfig(epochs=10)
    sisa: SisaConfig = SisaConfig()
    fisher: FisherConfig = FisherConfig()
    influence: InfluenceConfig = InfluenceConfig()
    adversary: AdversaryConfig = AdversaryConfig()
    unlearn_method: str = "influence"
    minibatch_size: int = 25
    fractions: tuple[float, ...] = (0.05, 0.10, 0.20, 0.30)
    healing: HealingSpec = HealingSpec()
    repetitions: int = 5
    primary_fraction: float = 0.7
    validation_fraction: float = 0.2
    out_dir: str = "runs/out"
    seed: int = 0
    source_path: str | None = None
    digest: str = ""

    def __post_init__(self):
        if self.unlearn_method not in ("naive", "sisa", "fisher", "influence"):
            raise ValueError(f"unknown unlearn method {self.unlearn_method!r}")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not 0.0 < self.primary_fraction <= 1.0:
            raise ValueError("primary_fraction must lie in (0, 1]")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if any(not 0.0 < f < 1.0 for f in self.fractions):
            raise ValueError("sweep fractions must lie in (0, 1)")
        if (
            self.adversary.target_class is not None
            and self.dataset.source == "blobs"
            and self.adversary.target_class >= self.dataset.num_classes
        ):
            raise ValueError("adversary target_class outside the dataset's classes")

    def epochs_n(self) -> int:
        return self.train_cfg.epochs

    def heal_epoch_settings(self) -> tuple[int, int]:
        return 1, math.ceil(self.train_cfg.epochs / 2)


def _pick(section: dict, cls, **renames):
    """Build a dataclass from a TOML section, renaming keys where needed."""
    kwargs = {}
    fields = cls.__dataclass_fields__
    for key, value in section.items():
        name = renames.get(key, key)
        if name not in fields:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[name] = value
    return cls(**kwargs)


def _parse_delta(value) -> float:
    if isinstance(value, str):
        if value.lower() in ("inf", "infinity"):
            return math.inf
        return float(value)
    return float(value)


def config_digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def from_dict(raw: dict, source_path: str | None = None, digest: str | None = None):
    """Assemble an ExperimentConfig from a parsed TOML mapping."""
    raw = dict(raw)
    seed = int(raw.get("seed", 0))

    dataset = _pick(raw.get("dataset", {}), DatasetSpec)
    model = _pick(raw.get("model", {}), ModelSpec)

    train_raw = dict(raw.get("train", {}))
    if "adam_betas" in train_raw:
        train_raw["adam_betas"] = tuple(train_raw["adam_betas"])
    train_raw.setdefault("epochs", 10)
    train_cfg = _pick(train_raw, TrainConfig)

    sisa_raw = dict(raw.get("sisa", {}))
    sisa = SisaConfig(
        num_shards=sisa_raw.get("num_shards", 3),
        num_slices=sisa_raw.get("num_slices", 5),
        train_cfg=train_cfg,
        seed=seed,
    )

    fisher = _pick(raw.get("fisher", {}), FisherConfig)
    influence = _pick(raw.get("influence", {}), InfluenceConfig)
    influence = replace(influence, ridge=train_cfg.ridge)

    adv_raw = dict(raw.get("adversary", {}))
    adversary = _pick(adv_raw, AdversaryConfig)

    heal_raw = dict(raw.get("healing", {}))
    repetitions = int(raw.get("repetitions", heal_raw.pop("repetitions", 5)))
    if "delta" in heal_raw:
        heal_raw["delta"] = _parse_delta(heal_raw["delta"])
    healing = _pick(heal_raw, HealingSpec)

    unlearn_raw = dict(raw.get("unlearn", {}))
    split_raw = dict(raw.get("split", {}))
    sweep_raw = dict(raw.get("sweep", {}))
    out_raw = dict(raw.get("output", {}))

    if digest is None:
        canonical = json.dumps(raw, sort_keys=True).encode()
        digest = config_digest_bytes(canonical)

    return ExperimentConfig(
        dataset=dataset,
        model=model,
        train_cfg=train_cfg,
        sisa=sisa,
        fisher=fisher,
        influence=influence,
        adversary=adversary,
        unlearn_method=unlearn_raw.get("method", "influence"),
        minibatch_size=unlearn_raw.get("minibatch_size", 25),
        fractions=tuple(sweep_raw.get("fractions", (0.05, 0.10, 0.20, 0.30))),
        healing=healing,
        repetitions=repetitions,
        primary_fraction=split_raw.get("primary_fraction", 0.7),
        validation_fraction=split_raw.get("validation_fraction", 0.2),
        out_dir=out_raw.get("dir", "runs/out"),
        seed=seed,
        source_path=source_path,
        digest=digest,
    )


def from_toml(path) -> ExperimentConfig:
    path = Path(path)
    data = path.read_bytes()
    raw = tomli.loads(data.decode())
    return from_dict(raw, source_path=str(path), digest=config_digest_bytes(data))

"""Datasets: synthetic blobs, IDX/CSV ingestion, splits, hash-checked removal.

Every sample carries a 64-bit content hash as its id. Deletion requests are
validated against those ids, so a request naming content that was never in
the training set fails loudly (MembershipError) instead of being applied.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import FNV_OFFSET, FNV_PRIME, mix_seed
from .errors import FormatError, MembershipError

_MASK64 = (1 << 64) - 1

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def sample_id(features: np.ndarray, label: int) -> int:
    """Content hash of (features, label): FNV-1a over the canonical bytes.

    Canonical encoding is the little-endian float64 feature bytes followed
    by the label as a little-endian int64, so the id survives any
    save/reload path that preserves exact values.
    """
    feats = np.ascontiguousarray(features, dtype=np.float64)
    data = feats.astype("<f8", copy=False).tobytes() + struct.pack("<q", int(label))
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True, eq=False)
class Sample:
    """One labeled feature vector; id is a pure function of the content."""

    id: int
    features: np.ndarray
    label: int


def make_sample(features, label: int) -> Sample:
    feats = np.array(features, dtype=np.float64)
    feats.setflags(write=False)
    return Sample(id=sample_id(feats, label), features=feats, label=int(label))


@dataclass
class Dataset:
    """Immutable-by-convention ordered sample collection.

    Construction validates labels, dimensions and id uniqueness (exact
    duplicate content is rejected so hash membership stays unambiguous).
    """

    samples: list[Sample]
    num_classes: int
    feature_dim: int
    features: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("num_classes and feature_dim must be positive")
        seen: set[int] = set()
        for s in self.samples:
            if s.features.shape != (self.feature_dim,):
                raise ValueError(
                    f"sample {s.id:#x} has dim {s.features.shape}, "
                    f"expected ({self.feature_dim},)"
                )
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"label {s.label} out of range [0, {self.num_classes})")
            if s.id in seen:
                raise ValueError(
                    f"duplicate sample content (id {s.id:#018x}); "
                    "exact duplicates are not allowed"
                )
            seen.add(s.id)
        n = len(self.samples)
        self.features = (
            np.stack([s.features for s in self.samples])
            if n
            else np.empty((0, self.feature_dim))
        )
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.samples]

    def id_set(self) -> set[int]:
        return {s.id for s in self.samples}

    def by_id(self, sid: int) -> Sample:
        for s in self.samples:
            if s.id == sid:
                return s
        raise MembershipError(sid)

    def select(self, indices) -> "Dataset":
        return Dataset(
            [self.samples[i] for i in indices], self.num_classes, self.feature_dim
        )


@dataclass(frozen=True)
class SplitSpec:
    """Stratified two-way split description (primary side gets the fraction)."""

    primary_fraction: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.primary_fraction <= 1.0:
            raise ValueError("primary_fraction must be in (0, 1]")


def generate_blobs(
    num_classes: int,
    per_class: int,
    feature_dim: int,
    spread: float,
    seed: int,
    class_distance: float = 2.0,
) -> Dataset:
    """Gaussian class clusters with means on a regular simplex.

    Means are the scaled standard basis vectors e_c * class_distance/sqrt(2),
    so every pair of class means is exactly `class_distance` apart. Requires
    feature_dim >= num_classes.
    """
    if num_classes < 1 or feature_dim < 1:
        raise ValueError("num_classes and feature_dim must be positive")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    if feature_dim < num_classes:
        raise ValueError("feature_dim must be >= num_classes for simplex means")
    rng = np.random.default_rng(mix_seed(seed, "blobs"))
    samples = []
    scale = class_distance / np.sqrt(2.0)
    for c in range(num_classes):
        mean = np.zeros(feature_dim)
        mean[c] = scale
        pts = rng.normal(loc=mean, scale=spread, size=(per_class, feature_dim))
        for row in pts:
            samples.append(make_sample(row, c))
    return Dataset(samples, num_classes=num_classes, feature_dim=feature_dim)


def _read_be_u32(f, path: Path, what: str) -> int:
    data = f.read(4)
    if len(data) != 4:
        raise FormatError(f"{path}: truncated file while reading {what}")
    return struct.unpack(">I", data)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (big-endian, MNIST layout).

    Pixel bytes are scaled to [0, 1] and flattened row-major.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic = _read_be_u32(f, images_path, "magic")
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(
                f"{images_path}: bad image magic {magic:#010x}, "
                f"expected {IDX_IMAGE_MAGIC:#010x}"
            )
        count = _read_be_u32(f, images_path, "count")
        rows = _read_be_u32(f, images_path, "rows")
        cols = _read_be_u32(f, images_path, "cols")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError(f"{images_path}: truncated pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic = _read_be_u32(f, labels_path, "magic")
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(
                f"{labels_path}: bad label magic {magic:#010x}, "
                f"expected {IDX_LABEL_MAGIC:#010x}"
            )
        label_count = _read_be_u32(f, labels_path, "count")
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise FormatError(f"{labels_path}: truncated label data")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if count != label_count:
        raise FormatError(
            f"count mismatch: {count} images in {images_path} but "
            f"{label_count} labels in {labels_path}"
        )
    num_classes = int(labels.max()) + 1 if label_count else 1
    samples = [
        make_sample(pixels[i] / 255.0, int(labels[i])) for i in range(count)
    ]
    return Dataset(samples, num_classes=num_classes, feature_dim=rows * cols)


def load_csv(path, label_column: str = "label") -> Dataset:
    """Load a rectangular numeric CSV with a header row.

    Features are all non-label columns in header order. Line numbers in
    errors are 1-based file lines (header is line 1).
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, no header") from None
        if label_column not in header:
            raise FormatError(
                f"{path}: unknown label column {label_column!r}; "
                f"available: {header}"
            )
        label_idx = header.index(label_column)
        feat_cols = [i for i in range(len(header)) if i != label_idx]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: ragged row at line {lineno}: "
                    f"{len(row)} cells, expected {len(header)}"
                )
            try:
                feats = [float(row[i]) for i in feat_cols]
            except ValueError as e:
                raise FormatError(f"{path}: non-numeric cell at line {lineno}: {e}") from None
            try:
                label = int(float(row[label_idx]))
            except ValueError:
                raise FormatError(
                    f"{path}: non-numeric label at line {lineno}: {row[label_idx]!r}"
                ) from None
            rows.append((feats, label))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    num_classes = max(label for _, label in rows) + 1
    samples = [make_sample(feats, label) for feats, label in rows]
    return Dataset(samples, num_classes=num_classes, feature_dim=len(feat_cols))


def save_csv(d: Dataset, path) -> None:
    """Snapshot a dataset as CSV (floats via repr, so reload is exact)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"f{i}" for i in range(d.feature_dim)] + ["label"])
        for s in d.samples:
            writer.writerow([repr(float(v)) for v in s.features] + [s.label])


def split_primary_backup(d: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset]:
    """Stratified split into (primary, backup); |primary| = round(f * |d|).

    Per-class targets are apportioned by largest remainder, so every class
    count in the primary side is within one sample of its exact share.
    """
    n = len(d)
    size_primary = int(round(spec.primary_fraction * n))
    by_class: dict[int, list[int]] = {}
    for i, s in enumerate(d.samples):
        by_class.setdefault(s.label, []).append(i)
    classes = sorted(by_class)
    targets = {c: size_primary * len(by_class[c]) / n for c in classes}
    take = {c: int(np.floor(targets[c])) for c in classes}
    leftover = size_primary - sum(take.values())
    # distribute the remainder to the largest fractional parts (ties: low class)
    order = sorted(classes, key=lambda c: (-(targets[c] - take[c]), c))
    for c in order[:leftover]:
        take[c] += 1
    rng = np.random.default_rng(mix_seed(spec.seed, "split"))
    primary_idx: list[int] = []
    for c in classes:
        idx = by_class[c]
        perm = rng.permutation(len(idx))
        primary_idx.extend(idx[j] for j in perm[: take[c]])
    chosen = set(primary_idx)
    primary = d.select([i for i in range(n) if i in chosen])
    backup = d.select([i for i in range(n) if i not in chosen])
    return primary, backup


def remove_by_ids(d: Dataset, ids) -> Dataset:
    """Return the dataset without the given ids, preserving survivor order.

    Every id must be present (hash-check); an unknown id raises
    MembershipError naming the offender.
    """
    ids = list(ids)
    present = d.id_set()
    for sid in ids:
        if sid not in present:
            raise MembershipError(sid)
    drop = set(ids)
    survivors = [s for s in d.samples if s.id not in drop]
    return Dataset(survivors, num_classes=d.num_classes, feature_dim=d.feature_dim)


def samples_by_ids(d: Dataset, ids) -> list[Sample]:
    """Fetch samples for the given ids (hash-checked), in the given order."""
    index = {s.id: s for s in d.samples}
    out = []
    for sid in ids:
        if sid not in index:
            raise MembershipError(sid)
        out.append(index[sid])
    return out

"""Datasets, non-i.i.d. partitioning, concept-shift injection and the
per-vehicle diversity index used for cluster-head selection."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigurationError, DomainError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    indices: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ConfigurationError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("features and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        source = self.indices[idx] if self.indices is not None else idx
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes, source)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True)
class PartitionSpec:
    """How training data is split across vehicles.

    ``scheme="shards"`` sorts by label and deals whole shards; ``scheme="iid"``
    gives every vehicle ``samples_per_vehicle`` uniformly drawn samples.
    """

    num_shards: int = 1200
    shard_size: int = 50
    min_shards: int = 1
    max_shards: int = 30
    scheme: str = "shards"
    samples_per_vehicle: int = 300

    def __post_init__(self):
        if self.scheme not in ("shards", "iid"):
            raise ConfigurationError(f"unknown partition scheme {self.scheme!r}")
        if self.num_shards < 1 or self.shard_size < 1:
            raise ConfigurationError("num_shards and shard_size must be >= 1")
        if not (1 <= self.min_shards <= self.max_shards):
            raise ConfigurationError("need 1 <= min_shards <= max_shards")
        if self.samples_per_vehicle < 1:
            raise ConfigurationError("samples_per_vehicle must be >= 1")


@dataclass(frozen=True)
class ConceptShiftSpec:
    """``swap_pairs[g]`` lists the label pairs exchanged inside group ``g``."""

    n_shifts: int = 1
    swap_pairs: tuple[tuple[tuple[int, int], ...], ...] = ((),)

    def __post_init__(self):
        pairs = tuple(tuple(tuple(int(a) for a in p) for p in group) for group in self.swap_pairs)
        object.__setattr__(self, "swap_pairs", pairs)
        if self.n_shifts < 1:
            raise ConfigurationError("n_shifts must be >= 1")
        if len(pairs) not in (0, self.n_shifts):
            raise ConfigurationError("swap_pairs needs one entry per group")
        for group in pairs:
            seen = [a for p in group for a in p]
            if any(len(p) != 2 for p in group) or len(seen) != len(set(seen)):
                raise ConfigurationError("each label may appear at most once per group")

    def pairs_for(self, group: int) -> tuple[tuple[int, int], ...]:
        return self.swap_pairs[group] if self.swap_pairs else ()

    def validate_labels(self, num_classes: int) -> None:
        for group in self.swap_pairs:
            for a, b in group:
                if not (0 <= a < num_classes and 0 <= b < num_classes):
                    raise ConfigurationError(f"swap pair ({a}, {b}) outside [0, {num_classes})")


@dataclass
class DatasetMeta:
    size: int
    label_entropy: float
    age: int = 0


# --------------------------------------------------------------------------- data sources


def _class_means(rng, C: int, d: int, min_distance: float = 4.0) -> np.ndarray:
    if d >= C:
        # orthogonal directions; pairwise distance is scale * sqrt(2)
        q, _ = np.linalg.qr(rng.normal(size=(d, C)))
        return q.T * (min_distance / math.sqrt(2.0))
    means = rng.normal(size=(C, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    gaps = np.linalg.norm(means[:, None] - means[None], axis=-1)
    smallest = gaps[np.triu_indices(C, 1)].min()
    if smallest < 1e-9:
        raise ConfigurationError("class means collapsed; use more dimensions")
    return means * (min_distance / smallest)


def synth_dataset(C: int, d: int, n: int, seed, min_distance: float = 4.0) -> LabeledDataset:
    """Balanced Gaussian blobs with unit covariance.

    Class counts differ by at most one. Means sit on orthogonal directions when
    ``d >= C`` (a scaled simplex) and on normalised random directions
    otherwise; in both cases every pair of means is at least ``min_distance``
    apart.
    """
    if C < 2 or d < 1 or n < C:
        raise ConfigurationError("need C >= 2, d >= 1, n >= C")
    rng = np.random.default_rng(seed)
    means = _class_means(rng, C, d, min_distance)
    labels = np.arange(n) % C
    rng.shuffle(labels)
    features = means[labels] + rng.normal(size=(n, d))
    return LabeledDataset(features, labels.astype(np.int64), C)


def synth_train_test(C: int, d: int, n_train: int, n_test: int, seed, min_distance: float = 4.0):
    """Train and test sets drawn from the same class-conditional distribution."""
    full = synth_dataset(C, d, n_train + n_test, seed, min_distance)
    train = LabeledDataset(full.features[:n_train], full.labels[:n_train], C)
    test = LabeledDataset(full.features[n_train:], full.labels[n_train:], C)
    return train, test


def _read_idx(path, expected_magic: int):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: file too short for an IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) != expected:
        raise FormatError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Read an MNIST-layout IDX image/label pair; pixels are scaled to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(features, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels ``(n,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


# --------------------------------------------------------------------------- partitioning


def _draw_shard_counts(rng, K: int, lo: int, hi: int, num_shards: int) -> np.ndarray:
    counts = rng.integers(lo, hi + 1, size=K)
    while counts.sum() > num_shards:
        new_hi = max(lo, int(hi * num_shards / counts.sum()))
        if K * lo > num_shards:
            raise ConfigurationError(f"{K} vehicles need at least {K * lo} shards, only {num_shards} exist")
        if new_hi == hi:
            new_hi = hi - 1
        logger.info("shard demand %d exceeds %d shards; redrawing with max_shards=%d", counts.sum(), num_shards, new_hi)
        hi = new_hi
        counts = rng.integers(lo, hi + 1, size=K)
    return counts


def partition_shards(ds: LabeledDataset, K: int, spec: PartitionSpec, seed) -> list[LabeledDataset]:
    """Split ``ds`` across ``K`` vehicles.

    With the shard scheme the data is stably sorted by label and cut into
    ``num_shards`` contiguous shards; each vehicle gets a uniform number of
    shards in ``[min_shards, max_shards]`` drawn without replacement. Shards
    left over are unused. Each returned dataset keeps the source row indices
    in ``indices``.
    """
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    rng = np.random.default_rng(seed)
    if spec.scheme == "iid":
        need = K * spec.samples_per_vehicle
        if need > len(ds):
            raise ConfigurationError(f"iid partition needs {need} samples, dataset has {len(ds)}")
        perm = rng.permutation(len(ds))[:need].reshape(K, spec.samples_per_vehicle)
        return [ds.subset(np.sort(row)) for row in perm]

    if spec.num_shards * spec.shard_size > len(ds):
        raise ConfigurationError(
            f"{spec.num_shards} shards of {spec.shard_size} exceed dataset size {len(ds)}"
        )
    order = np.argsort(ds.labels, kind="stable")[: spec.num_shards * spec.shard_size]
    shards = order.reshape(spec.num_shards, spec.shard_size)
    counts = _draw_shard_counts(rng, K, spec.min_shards, spec.max_shards, spec.num_shards)
    picked = rng.permutation(spec.num_shards)[: counts.sum()]
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [ds.subset(shards[picked[bounds[k] : bounds[k + 1]]].ravel()) for k in range(K)]


def shard_index(partitions) -> dict:
    """JSON-ready map of vehicle id to the source sample indices it holds."""
    return {str(k): [int(i) for i in p.indices] for k, p in enumerate(partitions)}


def save_shard_index(partitions, path) -> None:
    Path(path).write_text(json.dumps(shard_index(partitions)))


def group_of(K: int, n_shifts: int) -> np.ndarray:
    """Contiguous, near-equal group labels for vehicle indices ``0..K-1``."""
    return (np.arange(K) * n_shifts) // K


def swap_labels(labels: np.ndarray, pairs) -> np.ndarray:
    out = labels.copy()
    for a, b in pairs:
        out[labels == a] = b
        out[labels == b] = a
    return out


def apply_concept_shift(partitions, spec: ConceptShiftSpec):
    """Swap label pairs per vehicle group.

    Returns the shifted partitions and the ground-truth group of each vehicle.
    Features and sizes are untouched.
    """
    groups = group_of(len(partitions), spec.n_shifts)
    shifted = []
    for ds, g in zip(partitions, groups):
        pairs = spec.pairs_for(int(g))
        if pairs:
            spec.validate_labels(ds.num_classes)
        labels = swap_labels(ds.labels, pairs)
        shifted.append(LabeledDataset(ds.features, labels, ds.num_classes, ds.indices))
    return shifted, groups


def split_test_by_group(test: LabeledDataset, spec: ConceptShiftSpec) -> list[LabeledDataset]:
    """Cut the test set into ``n_shifts`` contiguous parts with each group's swaps applied."""
    parts = np.array_split(np.arange(len(test)), spec.n_shifts)
    out = []
    for g, idx in enumerate(parts):
        sub = test.subset(idx)
        out.append(LabeledDataset(sub.features, swap_labels(sub.labels, spec.pairs_for(g)), sub.num_classes, sub.indices))
    return out


# --------------------------------------------------------------------------- diversity index


def label_entropy(labels, num_classes: int) -> float:
    """Shannon entropy (nats) of the label histogram."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=num_classes).astype(float)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def dataset_meta(ds: LabeledDataset, age: int = 0) -> DatasetMeta:
    return DatasetMeta(size=len(ds), label_entropy=label_entropy(ds.labels, ds.num_classes), age=age)


DEFAULT_WEIGHTS = (0.4, 0.4, 0.2)


class DiversityIndex(TransformerMixin, BaseEstimator):
    """Weighted sum of min-max normalised dataset metrics.

    Rows of ``X`` are vehicles; columns are (label entropy, dataset size, age).
    ``fit`` records the per-column range of the current fleet, ``transform``
    maps rows onto ``[0, 1]`` with those ranges. Constant columns contribute 0.
    """

    def __init__(self, weights=DEFAULT_WEIGHTS):
        self.weights = weights

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (X.shape[1],):
            raise ConfigurationError(f"need {X.shape[1]} weights, got {w.shape}")
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
            raise ConfigurationError("weights must be non-negative and sum to 1")
        self.weights_ = w
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        span = self.data_max_ - self.data_min_
        safe = np.where(span > 0, span, 1.0)
        phi = np.where(span > 0, (X - self.data_min_) / safe, 0.0)
        return np.clip(phi, 0.0, 1.0) @ self.weights_


def diversity_index(metas, weights=DEFAULT_WEIGHTS) -> np.ndarray:
    """Diversity index of every vehicle in the current fleet (values in [0, 1])."""
    metas = list(metas)
    if not metas:
        raise DomainError("diversity index needs at least one vehicle")
    X = np.array([[m.label_entropy, m.size, m.age] for m in metas], dtype=float)
    return DiversityIndex(weights).fit_transform(X)

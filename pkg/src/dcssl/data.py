"""Datasets: bit-exact CIFAR-10 binary ingestion, synthetic Gaussian blobs,
stratified semi-supervised splits, and deterministic batch iteration.

The CIFAR-10 binary layout is parsed record by record: 3073 bytes each, one
label byte (0-9) followed by 3072 pixel bytes as three channel planes of
1024 row-major bytes; pixels are scaled to [0, 1] by division by 255 and
never otherwise touched, so a content checksum is stable across runs and
platforms.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import ConfigError, DomainError, Rng, ShapeError, Tensor, as_tensor

__all__ = [
    "Dataset",
    "SemiSplit",
    "Batch",
    "CifarFormatError",
    "read_cifar_batch",
    "load_cifar10",
    "synth_blobs",
    "split_semi",
    "batch_iter",
    "CIFAR_RECORD_BYTES",
    "CIFAR_TRAIN_FILES",
    "CIFAR_TEST_FILE",
]

CIFAR_RECORD_BYTES = 3073
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    """Samples, labels, and the standardization statistics they were given.

    ``x`` is either n x d (flat) or n x h x w x ch (images); ``mean``/``std``
    are per-feature or per-channel respectively. Subsets and companion test
    sets keep the statistics of the set they derive from, so evaluation always
    standardizes with training statistics.
    """

    x: Tensor
    y: np.ndarray
    class_count: int
    mean: Tensor
    std: Tensor

    @classmethod
    def create(cls, x, y, class_count: int) -> "Dataset":
        x = as_tensor(x)
        y = np.asarray(y, dtype=np.int64)
        if x.ndim not in (2, 4):
            raise ShapeError(f"dataset x must be n x d or n x h x w x ch, got {x.shape}")
        n = x.shape[0]
        if n == 0:
            raise ShapeError("dataset must contain at least one sample")
        if y.shape != (n,):
            raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
        if class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {class_count}")
        if len(y) and (y.min() < 0 or y.max() >= class_count):
            raise DomainError(
                f"labels must lie in [0, {class_count}), got range "
                f"[{y.min()}, {y.max()}]"
            )
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        std = np.where(std < 1e-12, 1.0, std)  # constant features pass through
        return cls(x=x, y=y, class_count=class_count, mean=mean, std=std)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def flat_dim(self) -> int:
        return int(np.prod(self.x.shape[1:]))

    def standardize(self, arr=None) -> Tensor:
        a = self.x if arr is None else as_tensor(arr)
        return (a - self.mean) / self.std

    def model_inputs(self, arr=None) -> Tensor:
        """Standardized samples flattened to an n x d matrix."""
        a = self.standardize(arr)
        return a.reshape(a.shape[0], -1)

    def subset(self, indices, keep_stats: bool = True) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        sub_x = self.x[indices].copy()
        sub_y = self.y[indices].copy()
        if keep_stats:
            return replace(self, x=sub_x, y=sub_y)
        return Dataset.create(sub_x, sub_y, self.class_count)

    def with_stats(self, ref: "Dataset") -> "Dataset":
        return replace(self, mean=ref.mean.copy(), std=ref.std.copy())

    def checksum(self) -> str:
        """Content hash over canonical little-endian bytes of x and y."""
        digest = hashlib.sha256()
        digest.update(repr(self.x.shape).encode())
        digest.update(np.ascontiguousarray(self.x, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.y, dtype="<i8").tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class SemiSplit:
    """Disjoint labeled/unlabeled index sets covering a training set."""

    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray

    @property
    def n_labeled(self) -> int:
        return len(self.labeled_idx)

    @property
    def n_total(self) -> int:
        return len(self.labeled_idx) + len(self.unlabeled_idx)


@dataclass(frozen=True)
class Batch:
    """One step's worth of indices into the training set."""

    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labeled_idx) + len(self.unlabeled_idx)


class CifarFormatError(ValueError):
    """A CIFAR-10 binary file violates the record layout."""


def read_cifar_batch(path) -> tuple[np.ndarray, Tensor]:
    """Parse one binary batch file into (labels, pixels in [0,1] as n x 32 x 32 x 3)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR-10 batch file not found: {path}")
    raw = path.read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        complete = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise CifarFormatError(
            f"{path}: file length {len(raw)} is not a multiple of "
            f"{CIFAR_RECORD_BYTES}; truncated record starts at byte offset {complete}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        i = int(bad[0])
        raise CifarFormatError(
            f"{path}: label byte {int(labels[i])} at byte offset "
            f"{i * CIFAR_RECORD_BYTES} exceeds 9"
        )
    pixels = (
        records[:, 1:]
        .reshape(-1, 3, 32, 32)
        .transpose(0, 2, 3, 1)
        .astype(np.float64)
        / 255.0
    )
    return labels.astype(np.int64), pixels


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """Load the binary CIFAR-10 distribution from a directory.

    Expects the five training batch files plus the test batch. The test set
    carries the training set's standardization statistics.
    """
    directory = Path(directory)
    train_parts = [read_cifar_batch(directory / name) for name in CIFAR_TRAIN_FILES]
    train_y = np.concatenate([labels for labels, _ in train_parts])
    train_x = np.concatenate([pixels for _, pixels in train_parts])
    test_y, test_x = read_cifar_batch(directory / CIFAR_TEST_FILE)
    train = Dataset.create(train_x, train_y, class_count=10)
    test = Dataset.create(test_x, test_y, class_count=10).with_stats(train)
    return train, test


def _simplex_centers(classes: int, dim: int, edge: float) -> Tensor:
    """`classes` points in R^dim with all pairwise distances exactly `edge`."""
    if classes > dim + 1:
        raise ConfigError(
            f"cannot place {classes} equidistant centers in {dim} dimensions "
            f"(need classes <= dim + 1)"
        )
    if dim >= classes:
        centers = np.zeros((classes, dim))
        centers[:, :classes] = np.eye(classes) * (edge / math.sqrt(2.0))
        return centers
    # dim == classes - 1: orthonormal basis of the centered standard simplex
    u = np.eye(classes) - 1.0 / classes
    basis = np.linalg.svd(u)[2][: classes - 1]
    return (u @ basis.T) * (edge / math.sqrt(2.0))


def synth_blobs(
    rng: Rng, classes: int, per_class: int, dim: int, spread: float = 1.0
) -> Dataset:
    """Isotropic Gaussian blobs around equidistant centers 4*spread apart."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ConfigError(f"need at least 1 sample per class, got {per_class}")
    if dim < 2:
        raise ConfigError(f"need dim >= 2, got {dim}")
    if spread <= 0:
        raise ConfigError(f"spread must be > 0, got {spread}")
    centers = _simplex_centers(classes, dim, edge=4.0 * spread)
    y = np.repeat(np.arange(classes), per_class)
    x = centers[y] + spread * rng.normal((classes * per_class, dim))
    return Dataset.create(x, y, class_count=classes)


def split_semi(ds: Dataset, labels_per_class: int, rng: Rng) -> SemiSplit:
    """Stratified labeled subset: exactly `labels_per_class` per class, rest unlabeled."""
    if labels_per_class < 1:
        raise ConfigError(f"labels_per_class must be >= 1, got {labels_per_class}")
    labeled = []
    for cls in range(ds.class_count):
        members = np.nonzero(ds.y == cls)[0]
        if len(members) < labels_per_class:
            raise ConfigError(
                f"class {cls} has {len(members)} samples, cannot label "
                f"{labels_per_class}"
            )
        picked = rng.substream("class", cls).choice(
            members, size=labels_per_class, replace=False
        )
        labeled.append(np.sort(picked))
    labeled_idx = np.sort(np.concatenate(labeled))
    mask = np.ones(ds.n, dtype=bool)
    mask[labeled_idx] = False
    return SemiSplit(labeled_idx=labeled_idx, unlabeled_idx=np.nonzero(mask)[0])


def _proportional_counts(sizes: np.ndarray, pool: int, total: int) -> np.ndarray:
    """Split `pool` items over batches of the given sizes, proportional to size.

    Cumulative rounding keeps every count within 1 of its exact quota and
    makes the counts sum to `pool` exactly.
    """
    cum = np.concatenate([[0], np.cumsum(sizes)])
    targets = np.round(cum * (pool / total)).astype(np.int64)
    return np.diff(targets)


def batch_iter(ds: Dataset, split: SemiSplit, batch: int, rng: Rng):
    """One shuffled epoch of mixed batches.

    Each batch holds a labeled and an unlabeled portion; the labeled share of
    every batch tracks the labeled share of the pool, with at least one
    labeled sample per batch, and one epoch emits every training index exactly
    once. A trailing batch smaller than `batch` is emitted if the sizes do not
    divide evenly.
    """
    if batch < 2:
        raise DomainError(f"batch size must be >= 2, got {batch}")
    n_lab = split.n_labeled
    n_total = split.n_total
    if n_total == 0:
        raise ConfigError("split covers no samples")
    if batch > n_total:
        raise ConfigError(
            f"batch size {batch} larger than dataset ({n_total} samples)"
        )
    steps = math.ceil(n_total / batch)
    if 0 < n_lab < steps:
        raise ConfigError(
            f"{n_lab} labeled samples cannot cover {steps} batches with one "
            f"labeled sample each; increase the batch size or the labeled set"
        )
    sizes = np.full(steps, batch, dtype=np.int64)
    sizes[-1] = n_total - batch * (steps - 1)

    lab_counts = _proportional_counts(sizes, n_lab, n_total)
    if n_lab > 0:
        while (lab_counts == 0).any():  # starved batch: borrow from the richest
            lab_counts[int(np.argmin(lab_counts))] += 1
            lab_counts[int(np.argmax(lab_counts))] -= 1

    perm_lab = rng.substream("labeled").permutation(split.labeled_idx)
    perm_unlab = rng.substream("unlabeled").permutation(split.unlabeled_idx)
    lab_pos = 0
    unlab_pos = 0
    for i in range(steps):
        take_lab = int(lab_counts[i])
        take_unlab = int(sizes[i]) - take_lab
        yield Batch(
            labeled_idx=perm_lab[lab_pos : lab_pos + take_lab],
            unlabeled_idx=perm_unlab[unlab_pos : unlab_pos + take_unlab],
        )
        lab_pos += take_lab
        unlab_pos += take_unlab

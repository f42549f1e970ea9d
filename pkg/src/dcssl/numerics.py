"""Dense float64 tensors and the stability-critical kernels shared package-wide.

Every numeric value in this package is a plain numpy float64 array laid out
sample-per-row. numpy supplies storage and the matrix product; this module adds
the shape/domain checking and the stability conventions (max-shifted softmax,
eps-guarded row normalization) that the model and loss code rely on, plus
seed-splittable random streams so shuffling, augmentation, and weight init
never share draws.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "ConfigError",
    "as_tensor",
    "matmul",
    "row_softmax",
    "l2_normalize_rows",
    "Rng",
]

# All tensors are float64 ndarrays; the alias marks intent in signatures.
Tensor = np.ndarray


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """A scalar argument lies outside its legal domain."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


def as_tensor(values) -> Tensor:
    """Coerce to a float64 array (no copy when already float64)."""
    return np.asarray(values, dtype=np.float64)


def _require_matrix(t: Tensor, name: str) -> None:
    if t.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with explicit shape checking.

    Summation order is numpy's fixed row-major contraction, so repeated calls
    on identical inputs reproduce bit-identical results on a given platform.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _require_matrix(a, "matmul left operand")
    _require_matrix(b, "matmul right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return a @ b


def row_softmax(m: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise softmax of m / temperature.

    The row maximum is subtracted before exponentiation, so arbitrarily large
    logits never overflow; the result is invariant to per-row constant shifts.
    """
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be > 0, got {temperature}")
    m = as_tensor(m)
    _require_matrix(m, "row_softmax input")
    shifted = (m - m.max(axis=1, keepdims=True)) / temperature
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def l2_normalize_rows(m: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||_2, eps); zero rows pass through scaled by 1/eps."""
    if eps <= 0:
        raise DomainError(f"l2_normalize_rows eps must be > 0, got {eps}")
    m = as_tensor(m)
    _require_matrix(m, "l2_normalize_rows input")
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, eps)


def _label_key(label) -> int:
    """Map a substream label to a stable non-negative integer."""
    if isinstance(label, (int, np.integer)) and int(label) >= 0:
        return int(label)
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seed-splittable random stream backed by the Philox counter generator.

    ``substream(*labels)`` derives an independent child stream from a label
    path, so each consumer (data shuffling, per-sample augmentation, weight
    init) owns its own stream and adding a consumer never shifts the draws of
    existing ones. Identical seeds reproduce identical streams bit-exactly.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, *labels) -> "Rng":
        return Rng(self.seed, self._path + tuple(_label_key(l) for l in labels))

    def normal(self, shape=None) -> Tensor:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape=None):
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, x):
        return self._gen.permutation(x)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"

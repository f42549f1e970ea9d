"""The three training loss heads and their weighted combination.

Both contrast heads are temperature-scaled InfoNCE objectives over a square
similarity matrix whose diagonal holds the positive pairs:

    L = -(1/n) sum_i log( exp(s_ii) / sum_j exp(s_ij) ),   s_ij = <u_i, v_j> / tau

with the positive term included in the denominator, so every per-anchor term
is a log-sum-exp minus its diagonal entry and therefore >= 0.

The feature head contrasts per-sample feature rows of two views of the same
batch: it pulls each sample toward its own augmentation and away from every
other sample's. The semantic head applies the identical objective to the
per-class probability *columns* of the two views' class-distribution matrices,
pulling each class's assignment profile toward its augmented counterpart --
instance discrimination at the feature level, assignment consistency at the
class level.

By default both heads L2-normalize their operands first (rows for features,
class columns for semantics), bounding the logits to [-1/tau, 1/tau]; pass
normalize=False for raw inner products. Log-sum-exp is computed max-shifted,
and every log is log(x + 1e-12).

All public functions are pure; each builds a small tape internally so the
training loop can reuse the identical graph construction for gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .numerics import ConfigError, DomainError, ShapeError, Tensor, as_tensor

__all__ = [
    "LossBreakdown",
    "infonce_graph",
    "feature_contrast_graph",
    "semantic_contrast_graph",
    "masked_cross_entropy_graph",
    "feature_contrast_loss",
    "semantic_contrast_loss",
    "cross_entropy_loss",
    "total_loss",
]

ROW_SUM_TOL = 1e-9


def infonce_graph(tape: Tape, left: int, right: int, temperature: float) -> int:
    """Mean InfoNCE over the rows of `left` against the rows of `right`.

    Row i of `right` is the positive for row i of `left`; all rows of `right`
    (including the positive) form the denominator. Returns a scalar node.
    """
    count = tape.value(left).shape[0]
    sim = tape.scale(tape.matmul(left, tape.transpose(right)), 1.0 / temperature)
    # Detached row maximum: shifting log-sum-exp by a constant changes neither
    # its value nor its gradient, but keeps exp() in range.
    shift = tape.constant(tape.value(sim).max(axis=1, keepdims=True))
    exps = tape.exp(tape.sub(sim, shift))
    lse = tape.add(tape.log_eps(tape.row_sum(exps)), shift)
    pos = tape.row_sum(tape.mul(sim, tape.constant(np.eye(count))))
    return tape.scale(tape.sum_all(tape.sub(lse, pos)), 1.0 / count)


def feature_contrast_graph(
    tape: Tape, z: int, z_aug: int, temperature: float, normalize: bool = True
) -> int:
    """Instance-level contrast over per-sample feature rows."""
    if normalize:
        z = tape.l2norm_rows(z)
        z_aug = tape.l2norm_rows(z_aug)
    return infonce_graph(tape, z, z_aug, temperature)


def semantic_contrast_graph(
    tape: Tape, q: int, q_aug: int, temperature: float, normalize: bool = True
) -> int:
    """Class-level contrast over per-class probability columns.

    Operands are n x c matrices with one probability distribution per row;
    the contrast runs over their c columns (each class's assignment profile
    across the batch).
    """
    qt = tape.transpose(q)
    q_aug_t = tape.transpose(q_aug)
    if normalize:
        qt = tape.l2norm_rows(qt)
        q_aug_t = tape.l2norm_rows(q_aug_t)
    return infonce_graph(tape, qt, q_aug_t, temperature)


def masked_cross_entropy_graph(
    tape: Tape, probs: int, onehot: Tensor, labeled_count: int
) -> int:
    """Mean -log p[i, y_i] over the rows whose one-hot target is non-zero.

    Rows excluded from supervision carry an all-zero one-hot row; their log
    term is multiplied away, so unlabeled rows contribute neither value nor
    gradient.
    """
    if labeled_count <= 0:
        raise DomainError("cross entropy needs at least one labeled row")
    target = tape.constant(onehot)
    picked = tape.row_sum(tape.mul(probs, target))
    mask = tape.constant(onehot.sum(axis=1, keepdims=True))
    terms = tape.mul(tape.log_eps(picked), mask)
    return tape.scale(tape.sum_all(terms), -1.0 / labeled_count)


def _check_pair(a: Tensor, b: Tensor, temperature: float, what: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(
            f"{what} operands must be equal-shape matrices, got {a.shape} and {b.shape}"
        )
    if a.shape[0] < 1:
        raise ShapeError(f"{what} needs at least one row, got shape {a.shape}")
    if temperature <= 0:
        raise DomainError(f"{what} temperature must be > 0, got {temperature}")


def feature_contrast_loss(
    z, z_aug, temperature: float, normalize: bool = True
) -> float:
    """Value of the feature-level InfoNCE loss for a batch of view pairs."""
    z = as_tensor(z)
    z_aug = as_tensor(z_aug)
    _check_pair(z, z_aug, temperature, "feature contrast")
    tape = Tape()
    out = feature_contrast_graph(
        tape, tape.constant(z), tape.constant(z_aug), temperature, normalize
    )
    return float(tape.value(out))


def semantic_contrast_loss(
    q, q_aug, temperature: float, normalize: bool = True
) -> float:
    """Value of the class-level InfoNCE loss for two class-distribution matrices."""
    q = as_tensor(q)
    q_aug = as_tensor(q_aug)
    _check_pair(q, q_aug, temperature, "semantic contrast")
    for name, mat in (("q", q), ("q_aug", q_aug)):
        sums = mat.sum(axis=1)
        if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
            worst = int(np.abs(sums - 1.0).argmax())
            raise DomainError(
                f"semantic contrast rows must be probability distributions; "
                f"{name} row {worst} sums to {sums[worst]!r}"
            )
    tape = Tape()
    out = semantic_contrast_graph(
        tape, tape.constant(q), tape.constant(q_aug), temperature, normalize
    )
    return float(tape.value(out))


def cross_entropy_loss(probs, labels) -> float:
    """Mean -log(p[i, labels[i]] + 1e-12) over a batch of probability rows."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2:
        raise ShapeError(f"cross entropy input must be 2-D, got shape {probs.shape}")
    m, c = probs.shape
    if m == 0:
        raise ShapeError("cross entropy needs at least one row")
    if labels.shape != (m,):
        raise ShapeError(
            f"labels must be a vector of length {m}, got shape {labels.shape}"
        )
    if labels.min() < 0 or labels.max() >= c:
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise DomainError(
            f"label {labels[bad]} at position {bad} outside [0, {c})"
        )
    onehot = np.zeros((m, c))
    onehot[np.arange(m), labels] = 1.0
    tape = Tape()
    out = masked_cross_entropy_graph(tape, tape.constant(probs), onehot, m)
    return float(tape.value(out))


@dataclass(frozen=True)
class LossBreakdown:
    """The three loss terms and their weighted total for one training step."""

    ce: float
    feature_contrast: float
    semantic_contrast: float
    total: float
    weights: tuple[float, float, float]


def total_loss(
    ce: float,
    feature_contrast: float,
    semantic_contrast: float,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossBreakdown:
    """Combine the three components; default unit weights."""
    w_ce, w_z, w_q = (float(w) for w in weights)
    if min(w_ce, w_z, w_q) < 0:
        raise ConfigError(f"loss weights must be non-negative, got {weights}")
    parts = (float(ce), float(feature_contrast), float(semantic_contrast))
    if not all(math.isfinite(p) for p in parts):
        raise DomainError(f"loss components must be finite, got {parts}")
    total = w_ce * parts[0] + w_z * parts[1] + w_q * parts[2]
    return LossBreakdown(parts[0], parts[1], parts[2], total, (w_ce, w_z, w_q))

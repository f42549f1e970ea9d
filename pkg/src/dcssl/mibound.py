"""Exact verification of the InfoNCE mutual-information inequality on small
discrete joints.

The contrastive objective used by the training losses is justified by an
information-theoretic inequality: for a joint p(r, r'), the density-ratio
critic

    f(r, r') = k * p(r'|r) / p(r')        (k > 0, which cancels everywhere)

and an n-way contrast in which the anchor pair is drawn from the joint and
the n-1 negatives i.i.d. from the marginal p(r'), the expected contrast loss

    L(n) = E[ -log f(r, r+) / (f(r, r+) + sum_j f(r, r-_j)) ]

satisfies, for every joint and every n >= 2,

    L(n) >= log n - MI(R; R')

so minimizing the contrast loss pushes up a lower bound on the mutual
information. On finite outcome spaces every quantity above is a finite sum,
so this module computes them by exhaustive enumeration and tests the
inequality to machine precision instead of sampling it. A looser derivation
replaces the negative-score sum by its expectation and arrives at an additive
constant log(n-1) instead of log n; that constant is reported alongside for
comparison (``paper_constant``) but never asserted.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .numerics import DomainError, Rng, ShapeError, Tensor, as_tensor

__all__ = [
    "EnumerationSizeError",
    "DiscreteJoint",
    "entropy",
    "mutual_information",
    "critic_value",
    "exact_infonce",
    "BoundReport",
    "verify_bound",
    "SweepRow",
    "sweep_bound",
    "SWEEP_COLUMNS",
    "diagonal_joint",
    "random_joint",
    "independent_joint",
]

SUM_TOL = 1e-12


class EnumerationSizeError(ValueError):
    """The exhaustive negative enumeration would exceed the term budget."""


@dataclass(frozen=True)
class DiscreteJoint:
    """A finite joint probability table p(r, r') with strictly positive marginals.

    Construct via ``from_table``: entries must be non-negative and sum to 1;
    outcomes with zero marginal probability are pruned so that every retained
    conditional and marginal is well defined.
    """

    probs: Tensor

    @classmethod
    def from_table(cls, table, atol: float = SUM_TOL) -> "DiscreteJoint":
        t = as_tensor(table)
        if t.ndim != 2:
            raise ShapeError(f"joint table must be 2-D, got shape {t.shape}")
        if t.size == 0:
            raise ShapeError("joint table must be non-empty")
        if (t < 0).any():
            r, s = (int(v) for v in np.argwhere(t < 0)[0])
            raise DomainError(f"joint table entry ({r},{s}) is negative: {t[r, s]!r}")
        total = float(t.sum())
        if abs(total - 1.0) > atol:
            raise DomainError(f"joint table must sum to 1, got {total!r}")
        keep_r = t.sum(axis=1) > 0
        keep_s = t.sum(axis=0) > 0
        pruned = t[np.ix_(keep_r, keep_s)].copy()
        if pruned.size == 0:
            raise DomainError("joint table has no outcome with positive probability")
        pruned.flags.writeable = False
        return cls(pruned)

    @property
    def m_r(self) -> int:
        return self.probs.shape[0]

    @property
    def m_s(self) -> int:
        return self.probs.shape[1]

    def marginals(self) -> tuple[Tensor, Tensor]:
        return self.probs.sum(axis=1), self.probs.sum(axis=0)


def entropy(p: Tensor) -> float:
    """Shannon entropy in nats with the 0 log 0 := 0 convention."""
    p = as_tensor(p)
    pos = p[p > 0]
    return float(-(pos * np.log(pos)).sum())


def mutual_information(joint: DiscreteJoint) -> float:
    """MI(R; R') = sum p(r,r') log[ p(r,r') / (p(r) p(r')) ] in nats."""
    p = joint.probs
    p_r, p_s = joint.marginals()
    outer = p_r[:, None] * p_s[None, :]
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / outer[mask])).sum())


def _critic_table(joint: DiscreteJoint, k: float) -> Tensor:
    p_r, p_s = joint.marginals()
    cond = joint.probs / p_r[:, None]
    return k * cond / p_s[None, :]


def critic_value(joint: DiscreteJoint, r: int, r_prime: int, k: float = 1.0) -> float:
    """The density-ratio critic k * p(r'|r) / p(r') at one outcome pair."""
    if k <= 0:
        raise DomainError(f"critic constant k must be > 0, got {k}")
    if not (0 <= r < joint.m_r and 0 <= r_prime < joint.m_s):
        raise DomainError(
            f"outcome pair ({r},{r_prime}) outside table of shape "
            f"{joint.m_r}x{joint.m_s}"
        )
    return float(_critic_table(joint, k)[r, r_prime])


def exact_infonce(
    joint: DiscreteJoint, n: int, k: float = 1.0, max_terms: int = 10_000_000
) -> float:
    """Exact expected n-way contrast loss under the density-ratio critic.

    The anchor pair (r, r') is drawn from the joint and the n-1 negatives
    i.i.d. from the marginal p(r'); the expectation enumerates every anchor
    pair and every negative configuration, weighting each term by its exact
    probability. The result lies in [0, log n] and is independent of k.
    """
    if n < 2:
        raise DomainError(f"contrast needs n >= 2 scores, got n={n}")
    if k <= 0:
        raise DomainError(f"critic constant k must be > 0, got {k}")
    m_s = joint.m_s
    n_configs = m_s ** (n - 1)
    if n_configs > max_terms:
        raise EnumerationSizeError(
            f"{m_s}^{n - 1} = {n_configs} negative configurations exceed the "
            f"{max_terms}-term enumeration budget; reduce n or the outcome "
            f"count, or estimate by Monte Carlo sampling instead"
        )
    p = joint.probs
    _, p_s = joint.marginals()
    critic = _critic_table(joint, k)

    configs = np.array(
        list(itertools.product(range(m_s), repeat=n - 1)), dtype=np.intp
    )
    neg_weight = p_s[configs].prod(axis=1)

    total = 0.0
    for r in range(joint.m_r):
        neg_score_sum = critic[r][configs].sum(axis=1)
        for s in range(m_s):
            w = p[r, s]
            if w == 0.0:
                continue
            # -log(f / (f + sum)) == log1p(sum / f), computed without cancellation
            terms = np.log1p(neg_score_sum / critic[r, s])
            total += w * float(neg_weight @ terms)
    return total


@dataclass(frozen=True)
class BoundReport:
    """One evaluation of the inequality L(n) + MI - log n >= 0."""

    infonce: float
    mi: float
    log_n: float
    gap: float
    passed: bool
    n: int
    tol: float
    paper_constant: float  # the looser derivation's additive constant, log(n-1)


def verify_bound(joint: DiscreteJoint, n: int, tol: float = 1e-9) -> BoundReport:
    """Check L(n) >= log n - MI by exact enumeration; pass iff gap >= -tol."""
    if tol <= 0:
        raise DomainError(f"tolerance must be > 0, got {tol}")
    infonce = exact_infonce(joint, n)
    mi = mutual_information(joint)
    log_n = math.log(n)
    gap = infonce + mi - log_n
    return BoundReport(
        infonce=infonce,
        mi=mi,
        log_n=log_n,
        gap=gap,
        passed=gap >= -tol,
        n=n,
        tol=tol,
        paper_constant=math.log(n - 1) if n > 1 else float("-inf"),
    )


def diagonal_joint(m: int) -> DiscreteJoint:
    """Uniform mass on the diagonal: perfectly correlated, MI = log m."""
    return DiscreteJoint.from_table(np.eye(m) / m)


def random_joint(rng: Rng, m_r: int, m_s: int) -> DiscreteJoint:
    """A dense random joint (uniform entries, normalized)."""
    table = rng.random((m_r, m_s))
    return DiscreteJoint.from_table(table / table.sum())


def independent_joint(rng: Rng, m_r: int, m_s: int) -> DiscreteJoint:
    """An exactly-independent joint: the outer product of two random marginals."""
    a = rng.random(m_r)
    b = rng.random(m_s)
    return DiscreteJoint.from_table(np.outer(a / a.sum(), b / b.sum()))


SWEEP_COLUMNS = ("seed", "m_r", "m_s", "n", "mi_nats", "infonce", "log_n", "gap", "pass")


@dataclass(frozen=True)
class SweepRow:
    seed: int
    m_r: int
    m_s: int
    n: int
    mi_nats: float
    infonce: float
    log_n: float
    gap: float
    passed: bool
    independent: bool  # generation metadata; not part of the CSV columns


def sweep_bound(
    joints: int = 200,
    max_outcomes: int = 5,
    max_n: int = 4,
    tol: float = 1e-9,
    seed: int = 0,
    independent_every: int = 10,
) -> list[SweepRow]:
    """Verify the bound over a seeded family of random joints.

    Every ``independent_every``-th joint is an exact product distribution,
    where the bound is tight (gap 0 up to rounding); the rest are dense random
    tables. Each joint draws sizes and n from its own substream, so the sweep
    is reproducible row by row.
    """
    root = Rng(seed)
    rows = []
    for i in range(joints):
        sub = root.substream("joint", i)
        m_r = int(sub.integers(2, max_outcomes + 1))
        m_s = int(sub.integers(2, max_outcomes + 1))
        n = int(sub.integers(2, max_n + 1))
        is_independent = independent_every > 0 and i % independent_every == 0
        if is_independent:
            joint = independent_joint(sub, m_r, m_s)
        else:
            joint = random_joint(sub, m_r, m_s)
        report = verify_bound(joint, n, tol)
        rows.append(
            SweepRow(
                seed=i,
                m_r=m_r,
                m_s=m_s,
                n=n,
                mi_nats=report.mi,
                infonce=report.infonce,
                log_n=report.log_n,
                gap=report.gap,
                passed=report.passed,
                independent=is_independent,
            )
        )
    return rows

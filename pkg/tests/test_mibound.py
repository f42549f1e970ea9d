import math

import numpy as np
import pytest

from dcssl.mibound import (
    DiscreteJoint,
    EnumerationSizeError,
    critic_value,
    diagonal_joint,
    entropy,
    exact_infonce,
    independent_joint,
    mutual_information,
    random_joint,
    sweep_bound,
    verify_bound,
)
from dcssl.numerics import DomainError, Rng, ShapeError


def mi_double_sum(probs):
    """Independent plain-Python double-sum reference."""
    probs = np.asarray(probs, dtype=float)
    p_r = probs.sum(axis=1)
    p_s = probs.sum(axis=0)
    total = 0.0
    for r in range(probs.shape[0]):
        for s in range(probs.shape[1]):
            p = probs[r, s]
            if p > 0:
                total += p * math.log(p / (p_r[r] * p_s[s]))
    return total


def mc_infonce(joint, n, samples, seed):
    """Monte Carlo estimate of the expected contrast loss (independent path).

    Returns (mean, standard error)."""
    rng = np.random.default_rng(seed)
    probs = joint.probs
    p_r, p_s = joint.marginals()
    critic = (probs / p_r[:, None]) / p_s[None, :]
    flat = probs.ravel()
    pair_idx = rng.choice(flat.size, size=samples, p=flat)
    r_idx, s_idx = np.unravel_index(pair_idx, probs.shape)
    neg_idx = rng.choice(joint.m_s, size=(samples, n - 1), p=p_s)
    f_pos = critic[r_idx, s_idx]
    f_neg = critic[r_idx[:, None], neg_idx].sum(axis=1)
    values = np.log1p(f_neg / f_pos)
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(samples))


class TestDiscreteJoint:
    def test_rejects_negative_entries(self):
        with pytest.raises(DomainError, match="negative"):
            DiscreteJoint.from_table([[0.5, -0.1], [0.3, 0.3]])

    def test_rejects_bad_total(self):
        with pytest.raises(DomainError, match="sum to 1"):
            DiscreteJoint.from_table([[0.5, 0.4]])

    def test_rejects_non_matrix(self):
        with pytest.raises(ShapeError):
            DiscreteJoint.from_table([0.5, 0.5])

    def test_prunes_zero_marginal_outcomes(self):
        table = np.array([[0.5, 0.0, 0.5], [0.0, 0.0, 0.0]])
        joint = DiscreteJoint.from_table(table)
        assert joint.probs.shape == (1, 2)
        p_r, p_s = joint.marginals()
        assert (p_r > 0).all() and (p_s > 0).all()

    def test_table_is_read_only(self):
        joint = diagonal_joint(3)
        with pytest.raises(ValueError):
            joint.probs[0, 0] = 0.5


class TestMutualInformation:
    def test_independent_joint_has_zero_mi(self):
        joint = DiscreteJoint.from_table(np.outer([0.3, 0.7], [0.2, 0.5, 0.3]))
        assert abs(mutual_information(joint)) < 1e-12

    def test_diagonal_uniform_equals_log_m(self):
        assert abs(mutual_information(diagonal_joint(4)) - math.log(4)) < 1e-12

    def test_matches_double_sum_reference(self):
        root = Rng(101)
        for i in range(50):
            sub = root.substream(i)
            joint = random_joint(sub, int(sub.integers(2, 6)), int(sub.integers(2, 6)))
            assert abs(mutual_information(joint) - mi_double_sum(joint.probs)) < 1e-12

    def test_symmetric_under_transpose(self):
        joint = random_joint(Rng(5), 4, 3)
        transposed = DiscreteJoint.from_table(joint.probs.T)
        assert abs(mutual_information(joint) - mutual_information(transposed)) < 1e-12

    def test_bounded_by_marginal_entropies(self):
        root = Rng(7)
        for i in range(50):
            sub = root.substream(i)
            joint = random_joint(sub, int(sub.integers(2, 6)), int(sub.integers(2, 6)))
            mi = mutual_information(joint)
            p_r, p_s = joint.marginals()
            assert -1e-12 <= mi <= min(entropy(p_r), entropy(p_s)) + 1e-12


class TestCritic:
    def test_independent_joint_gives_constant_k(self):
        joint = independent_joint(Rng(3), 3, 4)
        for k in (0.5, 1.0, 2.0):
            for r in range(3):
                for s in range(4):
                    assert critic_value(joint, r, s, k) == pytest.approx(k, rel=1e-12)

    def test_diagonal_pair(self):
        assert critic_value(diagonal_joint(2), 0, 0, k=1.0) == pytest.approx(2.0)

    def test_marginal_expectation_is_k(self):
        root = Rng(11)
        for i in range(10):
            joint = random_joint(root.substream(i), 4, 5)
            _, p_s = joint.marginals()
            k = 1.7
            for r in range(joint.m_r):
                expected = sum(
                    p_s[s] * critic_value(joint, r, s, k) for s in range(joint.m_s)
                )
                assert expected == pytest.approx(k, rel=1e-12)

    def test_bad_indices_rejected(self):
        with pytest.raises(DomainError):
            critic_value(diagonal_joint(2), 2, 0)

    def test_bad_k_rejected(self):
        with pytest.raises(DomainError):
            critic_value(diagonal_joint(2), 0, 0, k=0.0)


class TestExactInfonce:
    def test_independent_joint_gives_log_n(self):
        joint = DiscreteJoint.from_table(np.outer([0.25, 0.75], [0.6, 0.4]))
        for n in (2, 3, 4):
            assert exact_infonce(joint, n) == pytest.approx(math.log(n), abs=1e-13)

    def test_diagonal_two_outcome_hand_value(self):
        # anchors (0,0)/(1,1), one uniform negative: equal negative gives
        # -log(1/2), distinct negative gives 0 => L = log(2)/2
        got = exact_infonce(diagonal_joint(2), n=2)
        assert got == pytest.approx(0.5 * math.log(2), abs=1e-14)

    def test_monte_carlo_cross_check(self):
        joint = diagonal_joint(2)
        exact = exact_infonce(joint, n=2)
        estimate, stderr = mc_infonce(joint, n=2, samples=1_000_000, seed=99)
        assert abs(estimate - exact) < 3 * stderr

    def test_monte_carlo_cross_check_random_joint(self):
        joint = random_joint(Rng(13), 4, 3)
        exact = exact_infonce(joint, n=3)
        estimate, stderr = mc_infonce(joint, n=3, samples=500_000, seed=7)
        assert abs(estimate - exact) < 3 * stderr

    def test_invariant_to_k(self):
        joint = random_joint(Rng(17), 3, 4)
        base = exact_infonce(joint, 3, k=1.0)
        for k in (0.1, 10.0):
            assert abs(exact_infonce(joint, 3, k=k) - base) < 1e-12

    def test_range(self):
        root = Rng(19)
        for i in range(30):
            sub = root.substream(i)
            joint = random_joint(sub, int(sub.integers(2, 6)), int(sub.integers(2, 6)))
            n = int(sub.integers(2, 5))
            value = exact_infonce(joint, n)
            assert -1e-12 <= value <= math.log(n) + 1e-12

    def test_enumeration_guard(self):
        joint = random_joint(Rng(23), 5, 5)
        with pytest.raises(EnumerationSizeError, match="Monte Carlo"):
            exact_infonce(joint, n=12)

    def test_rejects_n_below_two(self):
        with pytest.raises(DomainError):
            exact_infonce(diagonal_joint(2), 1)


class TestVerifyBound:
    def test_independence_is_tight(self):
        joint = independent_joint(Rng(29), 3, 4)
        report = verify_bound(joint, 3)
        assert report.passed
        assert abs(report.gap) < 1e-12

    def test_diagonal_eight_n_four(self):
        report = verify_bound(diagonal_joint(8), 4)
        assert report.mi == pytest.approx(math.log(8), abs=1e-12)
        assert report.mi > report.log_n
        assert report.infonce >= 0
        assert report.gap > 0
        assert report.passed

    def test_paper_constant_reported(self):
        report = verify_bound(diagonal_joint(4), 3)
        assert report.paper_constant == pytest.approx(math.log(2))


class TestSweep:
    def test_sweep_all_pass(self):
        rows = sweep_bound(joints=60, max_outcomes=5, max_n=4, tol=1e-9, seed=7)
        assert len(rows) == 60
        assert all(r.passed for r in rows)
        assert all(r.gap >= -1e-9 for r in rows)

    def test_independent_rows_are_tight(self):
        rows = sweep_bound(joints=40, seed=3)
        independents = [r for r in rows if r.independent]
        assert independents, "sweep should include independence cases"
        assert all(abs(r.gap) <= 1e-12 for r in independents)

    def test_sweep_is_reproducible(self):
        a = sweep_bound(joints=20, seed=11)
        b = sweep_bound(joints=20, seed=11)
        assert a == b

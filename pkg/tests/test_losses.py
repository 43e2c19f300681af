"""Loss formulas against closed forms, brute-force pair oracles, and finite
differences, plus the invariants they must satisfy."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msn.losses import (
    ClassPartition,
    LogitBatch,
    between_class_loss,
    in_class_distance,
    msl_total,
    pair_count,
    softmax_probs,
    within_class_loss,
)
from msn.tensor import NonFiniteError

import oracles

finite_floats = st.floats(-5.0, 5.0, allow_nan=False)


@st.composite
def logit_batches(draw, max_n=16, max_c=6):
    n = draw(st.integers(1, max_n))
    c = draw(st.integers(2, max_c))
    q = draw(arrays(np.float64, (n, c), elements=finite_floats))
    y = draw(arrays(np.int64, (n,), elements=st.integers(0, c - 1)))
    return LogitBatch(q=q, y=y)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_probs(np.array([[0.0, 0.0, 0.0]])), 1 / 3,
                                   rtol=1e-15)

    def test_two_to_one(self):
        p = softmax_probs(np.array([[math.log(2.0), 0.0]]))
        np.testing.assert_allclose(p, [[2 / 3, 1 / 3]], rtol=1e-12)

    def test_matches_direct_oracle(self, rng):
        q = rng.standard_normal((5, 7)) * 3
        np.testing.assert_allclose(softmax_probs(q), oracles.softmax_direct(q), atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteError):
            softmax_probs(np.array([[np.inf, 0.0]]))

    @settings(max_examples=50, deadline=None)
    @given(q=arrays(np.float64, (3, 4), elements=finite_floats), shift=finite_floats)
    def test_row_shift_invariance(self, q, shift):
        base = softmax_probs(q)
        shifted = q.copy()
        shifted[1] += shift
        moved = softmax_probs(shifted)
        assert np.abs(moved[1] - base[1]).max() <= 1e-12
        assert np.abs(base.sum(axis=1) - 1.0).max() <= 1e-12


class TestBetweenClassLoss:
    def test_uniform_prediction(self):
        loss, _ = between_class_loss(LogitBatch(q=np.zeros((1, 2)), y=np.array([0])))
        assert abs(loss - math.log(2.0)) <= 1e-12

    def test_confident_prediction_closed_form(self):
        loss, _ = between_class_loss(LogitBatch(q=np.array([[20.0, 0.0]]), y=np.array([0])))
        assert abs(loss - math.log1p(math.exp(-20.0))) <= 1e-15

    def test_batch_is_mean_of_singles(self, rng):
        q = rng.standard_normal((2, 4))
        y = np.array([1, 3])
        both, _ = between_class_loss(LogitBatch(q=q, y=y))
        first, _ = between_class_loss(LogitBatch(q=q[:1], y=y[:1]))
        second, _ = between_class_loss(LogitBatch(q=q[1:], y=y[1:]))
        assert abs(both - (first + second) / 2) <= 1e-12

    def test_matches_direct_oracle(self, rng):
        q = rng.standard_normal((8, 5)) * 2
        y = rng.integers(0, 5, 8)
        loss, _ = between_class_loss(LogitBatch(q=q, y=y))
        assert abs(loss - oracles.between_class_direct(q, y)) <= 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        q = rng.standard_normal((6, 4))
        y = rng.integers(0, 4, 6)
        _, grad = between_class_loss(LogitBatch(q=q, y=y))
        fd = oracles.fd_grad(lambda a: between_class_loss(LogitBatch(q=a, y=y))[0], q)
        assert np.abs(grad - fd).max() <= 1e-8


class TestPairCount:
    @pytest.mark.parametrize("mu,expected", [(0, 0), (1, 0), (2, 1), (3, 3), (5, 10)])
    def test_values(self, mu, expected):
        assert pair_count(mu) == expected


class TestInClassDistance:
    def test_three_four_five(self):
        batch = LogitBatch(q=np.array([[0.0, 0.0], [3.0, 4.0]]), y=np.array([0, 0]))
        part = ClassPartition.from_labels(batch.y, 2)
        assert in_class_distance(batch, part, 0) == pytest.approx(5.0, abs=1e-12)

    def test_identical_vectors(self):
        batch = LogitBatch(q=np.ones((3, 4)), y=np.zeros(3, dtype=int))
        part = ClassPartition.from_labels(batch.y, 4)
        assert in_class_distance(batch, part, 0) == 0.0

    def test_matches_bruteforce_over_six_pairs(self, rng):
        q = rng.standard_normal((4, 5))
        y = np.zeros(4, dtype=int)
        batch = LogitBatch(q=q, y=y)
        part = ClassPartition.from_labels(y, 5)
        expected = oracles.class_distance_brute(q, y, 0)
        assert abs(in_class_distance(batch, part, 0) - expected) <= 1e-12

    def test_single_sample_class_rejected(self):
        batch = LogitBatch(q=np.zeros((1, 2)), y=np.array([0]))
        part = ClassPartition.from_labels(batch.y, 2)
        with pytest.raises(ValueError):
            in_class_distance(batch, part, 0)

    def test_partition_counts(self):
        y = np.array([0, 1, 1, 2, 2, 2])
        part = ClassPartition.from_labels(y, 4)
        assert part.mu.tolist() == [1, 2, 3, 0]
        assert part.lam.tolist() == [0, 1, 3, 0]
        assert part.mu.sum() == len(y)


class TestWithinClassLoss:
    def test_single_class_hinge_value(self):
        batch = LogitBatch(q=np.array([[0.0, 0.0], [3.0, 4.0]]), y=np.array([0, 0]))
        loss, _, dists = within_class_loss(batch, xi=0.5)
        assert loss == pytest.approx(4.5 ** 2, abs=1e-12)
        assert dists[0] == pytest.approx(5.0, abs=1e-12)

    def test_inactive_hinge_gives_zero_loss_and_gradient(self, rng):
        q = rng.standard_normal((6, 3)) * 0.01
        batch = LogitBatch(q=q, y=np.array([0, 0, 0, 1, 1, 1]))
        loss, grad, _ = within_class_loss(batch, xi=10.0)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_loss_matches_bruteforce_and_fd(self, rng):
        q = rng.standard_normal((32, 10)) * 2
        y = rng.integers(0, 10, 32)
        batch = LogitBatch(q=q, y=y)
        loss, grad, _ = within_class_loss(batch, xi=0.5)
        brute = oracles.within_class_brute(q, y, 0.5)
        assert abs(loss - brute) / max(1.0, abs(brute)) <= 1e-6
        fd = oracles.fd_grad(
            lambda a: within_class_loss(LogitBatch(q=a, y=y), xi=0.5)[0], q)
        denom = max(1.0, np.abs(fd).max())
        assert np.abs(grad - fd).max() / denom <= 1e-6

    def test_componentwise_mode_matches_bruteforce_and_fd(self, rng):
        q = rng.standard_normal((12, 4)) * 2
        y = rng.integers(0, 4, 12)
        batch = LogitBatch(q=q, y=y)
        loss, grad, _ = within_class_loss(batch, xi=0.5, distance_mode="componentwise")
        brute = oracles.within_class_brute(q, y, 0.5, mode="componentwise")
        assert abs(loss - brute) / max(1.0, abs(brute)) <= 1e-10
        fd = oracles.fd_grad(
            lambda a: within_class_loss(LogitBatch(q=a, y=y), xi=0.5,
                                        distance_mode="componentwise")[0], q)
        assert np.abs(grad - fd).max() / max(1.0, np.abs(fd).max()) <= 1e-6

    def test_zero_distance_pairs_contribute_zero_gradient(self):
        q = np.array([[1.0, 2.0], [1.0, 2.0], [4.0, 6.0]])
        batch = LogitBatch(q=q, y=np.zeros(3, dtype=int))
        loss, grad, _ = within_class_loss(batch, xi=0.1)
        assert np.all(np.isfinite(grad)) and loss > 0

    def test_hinge_is_smooth_at_threshold(self):
        # d approaches xi from above: both loss and gradient shrink to zero.
        xi = 1.0
        for delta in (1e-3, 1e-6):
            d = xi + delta
            q = np.array([[0.0, 0.0], [d, 0.0]])
            batch = LogitBatch(q=q, y=np.array([0, 0]))
            loss, grad, _ = within_class_loss(batch, xi=xi)
            assert loss <= delta ** 2 * (1 + 1e-9)
            assert np.abs(grad).max() <= 2 * delta * (1 + 1e-9)

    def test_rejects_nonpositive_xi(self):
        batch = LogitBatch(q=np.zeros((2, 2)), y=np.array([0, 0]))
        with pytest.raises(ValueError):
            within_class_loss(batch, xi=0.0)


class TestMslTotal:
    def test_all_singleton_classes_reduces_to_cross_entropy(self, rng):
        q = rng.standard_normal((4, 6))
        y = np.array([0, 2, 3, 5])
        batch = LogitBatch(q=q, y=y)
        breakdown, grad = msl_total(batch, xi=0.5)
        ce, ce_grad = between_class_loss(batch)
        assert breakdown.total == ce  # bit-for-bit
        assert breakdown.within == 0.0
        np.testing.assert_array_equal(grad, ce_grad)

    def test_total_is_sum_of_parts(self, rng):
        q = rng.standard_normal((16, 4)) * 2
        y = rng.integers(0, 4, 16)
        breakdown, _ = msl_total(LogitBatch(q=q, y=y), xi=0.2)
        assert abs(breakdown.total - (breakdown.between + breakdown.within)) <= 1e-12

    def test_gradient_matches_finite_differences(self, rng):
        q = rng.standard_normal((10, 3)) * 2
        y = rng.integers(0, 3, 10)
        _, grad = msl_total(LogitBatch(q=q, y=y), xi=0.2)
        fd = oracles.fd_grad(
            lambda a: msl_total(LogitBatch(q=a, y=y), xi=0.2)[0].total, q)
        assert np.abs(grad - fd).max() / max(1.0, np.abs(fd).max()) <= 1e-6

    def test_zero_weight_is_pure_cross_entropy(self, rng):
        q = rng.standard_normal((8, 3))
        y = rng.integers(0, 3, 8)
        batch = LogitBatch(q=q, y=y)
        breakdown, grad = msl_total(batch, xi=0.001, within_weight=0.0)
        ce, ce_grad = between_class_loss(batch)
        assert breakdown.total == ce
        np.testing.assert_array_equal(grad, ce_grad)


@settings(max_examples=80, deadline=None)
@given(batch=logit_batches())
def test_losses_are_non_negative(batch):
    breakdown, _ = msl_total(batch, xi=0.5)
    assert breakdown.between >= 0.0
    assert breakdown.within >= 0.0


@settings(max_examples=60, deadline=None)
@given(batch=logit_batches(), data=st.data())
def test_permutation_invariance(batch, data):
    perm = data.draw(st.permutations(range(batch.n)))
    perm = np.array(perm, dtype=np.int64)
    shuffled = LogitBatch(q=batch.q[perm], y=batch.y[perm])
    b0, g0 = msl_total(batch, xi=0.5)
    b1, g1 = msl_total(shuffled, xi=0.5)
    assert abs(b0.total - b1.total) <= 1e-9 * max(1.0, abs(b0.total))
    assert b0.per_class_distance.keys() == b1.per_class_distance.keys()
    np.testing.assert_allclose(g0[perm], g1, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    q=arrays(np.float64, (5, 3), elements=finite_floats),
    shift=arrays(np.float64, (3,), elements=finite_floats),
)
def test_class_shift_leaves_distance_unchanged(q, shift):
    y = np.array([0, 0, 0, 1, 1])
    part = ClassPartition.from_labels(y, 3)
    base = in_class_distance(LogitBatch(q=q, y=y), part, 0)
    moved = q.copy()
    moved[:3] += shift
    after = in_class_distance(LogitBatch(q=moved, y=y), part, 0)
    assert abs(base - after) <= 1e-9 * max(1.0, base)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 64), c=st.integers(2, 10), seed=st.integers(0, 2 ** 31))
def test_vectorized_within_loss_equals_all_pairs_oracle(n, c, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, c)) * 3
    y = rng.integers(0, c, n)
    loss, _, _ = within_class_loss(LogitBatch(q=q, y=y), xi=0.5)
    brute = oracles.within_class_brute(q, y, 0.5)
    assert abs(loss - brute) <= 1e-10 * max(1.0, abs(brute))

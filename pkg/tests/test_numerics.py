"""Checked matmul, per-channel moments, and the mean-L1 distance."""

import numpy as np
import pytest

from cacheq.numerics import (
    ShapeError,
    as_matrix,
    channel_stats,
    l1_mean_distance,
    matmul,
)


def naive_matmul(a, b):
    """Triple-loop reference used as the oracle for matmul."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestAsMatrix:
    def test_coerces_nested_lists(self):
        a = as_matrix([[1, 2], [3, 4]])
        assert a.dtype == np.float64 and a.shape == (2, 2)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            as_matrix([1.0, 2.0])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            as_matrix([[np.inf, 0.0]])


class TestMatmul:
    def test_matches_naive_triple_loop(self):
        gen = np.random.default_rng(7)
        for _ in range(30):
            m, k, n = (int(v) for v in gen.integers(1, 9, size=3))
            a = gen.standard_normal((m, k))
            b = gen.standard_normal((k, n))
            assert np.allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-12, atol=1e-12)

    def test_identity_factor_is_exact(self):
        gen = np.random.default_rng(8)
        a = gen.standard_normal((5, 4))
        b = gen.standard_normal((4, 3))
        assert np.array_equal(matmul(matmul(a, np.eye(4)), b), matmul(a, b))

    def test_inner_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            matmul(np.zeros((2, 3)), np.zeros((4, 5)))
        assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)

    def test_rejects_rank_one_operand(self):
        with pytest.raises(ShapeError):
            matmul(np.zeros(3), np.zeros((3, 2)))


class TestChannelStats:
    def test_known_column(self):
        stats = channel_stats([[1.0], [2.0], [3.0]])
        assert stats.means[0] == 2.0
        assert stats.variances[0] == 2.0 / 3.0

    def test_constant_column_has_exactly_zero_variance(self):
        stats = channel_stats(np.full((17, 3), 4.25))
        assert np.array_equal(stats.variances, np.zeros(3))

    def test_row_permutation_invariance(self):
        gen = np.random.default_rng(11)
        x = gen.standard_normal((40, 5))
        shuffled = x[gen.permutation(40)]
        a, b = channel_stats(x), channel_stats(shuffled)
        assert np.allclose(a.means, b.means, rtol=1e-12, atol=1e-12)
        assert np.allclose(a.variances, b.variances, rtol=1e-12, atol=1e-12)

    def test_variance_identity(self):
        # var(x) == mean(x^2) - mean(x)^2 for population moments
        gen = np.random.default_rng(12)
        for _ in range(20):
            x = gen.standard_normal((gen.integers(2, 60), 4)) * gen.uniform(0.1, 10)
            stats = channel_stats(x)
            want = np.mean(x**2, axis=0) - np.mean(x, axis=0) ** 2
            assert np.allclose(stats.variances, want, rtol=1e-9, atol=1e-9)

    def test_variances_never_negative(self):
        gen = np.random.default_rng(13)
        for _ in range(50):
            x = np.repeat(gen.standard_normal((1, 6)), 30, axis=0)
            x += gen.standard_normal(x.shape) * 1e-9
            assert (channel_stats(x).variances >= 0).all()

    def test_rejects_one_dimensional_input(self):
        with pytest.raises(ShapeError):
            channel_stats([1.0, 2.0])

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            channel_stats([[np.nan], [1.0]])


class TestL1MeanDistance:
    def test_identical_inputs_give_zero(self):
        x = np.arange(12.0).reshape(3, 4)
        assert l1_mean_distance(x, x) == 0.0

    def test_known_offset(self):
        x = np.zeros((2, 2))
        assert l1_mean_distance(x, x + 1.0) == 1.0

    def test_symmetry(self):
        gen = np.random.default_rng(21)
        for _ in range(20):
            x = gen.standard_normal((6, 3))
            y = gen.standard_normal((6, 3))
            assert l1_mean_distance(x, y) == l1_mean_distance(y, x)

    def test_triangle_inequality(self):
        gen = np.random.default_rng(22)
        for _ in range(50):
            x, y, z = (gen.standard_normal((8, 4)) for _ in range(3))
            lhs = l1_mean_distance(x, z)
            rhs = l1_mean_distance(x, y) + l1_mean_distance(y, z)
            assert lhs <= rhs + 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            l1_mean_distance(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            l1_mean_distance(np.zeros((0, 2)), np.zeros((0, 2)))

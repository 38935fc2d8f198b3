import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitq.tensor_core import (
    ShapeError, as_tensor, gelu, layer_norm, matmul, nuclear_norm, singular_values, softmax_rows,
)

# frozen from math.erf: 0.5 * (1 + erf(1 / sqrt(2)))
GELU_AT_1 = 0.8413447460685429
# 1 / sqrt(2/3), population variance of [1, 2, 3]
LN_123 = 1.224744871391589


def eig_oracle(m):
    m = np.asarray(m, dtype=np.float64)
    ev = np.linalg.eigvalsh(m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T)
    return np.sort(np.sqrt(np.clip(ev, 0, None)))[::-1]


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class TestTensor:
    def test_shape_and_dtype(self):
        t = as_tensor(range(6), (2, 3))
        assert t.shape == (2, 3) and t.dtype == np.float32

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            as_tensor(range(5), (2, 3))

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            as_tensor([1.0, bad])


class TestMatmul:
    def test_identity(self):
        a = np.array([[1, 2], [3, 4]], np.float32)
        np.testing.assert_array_equal(matmul(a, np.eye(2, dtype=np.float32)), a)

    def test_hand_product(self):
        a = np.array([[1, 2], [3, 4]], np.float32)
        b = np.array([[5, 6], [7, 8]], np.float32)
        np.testing.assert_array_equal(matmul(a, b), [[19, 22], [43, 50]])

    def test_zero(self, rng):
        a = rng.standard_normal((3, 4)).astype(np.float32)
        np.testing.assert_array_equal(matmul(a, np.zeros((4, 2), np.float32)), np.zeros((3, 2)))

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_associativity(self, rng):
        for _ in range(20):
            a, b, c = (rng.standard_normal((4, 4)).astype(np.float32) for _ in range(3))
            np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), atol=1e-4)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_rows(np.zeros((1, 2))), [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(softmax_rows(np.array([[math.log(2), 0.0]])), [[2 / 3, 1 / 3]], rtol=1e-12)

    def test_no_overflow(self):
        out = softmax_rows(np.array([[1000.0, 0.0]], np.float32))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-30)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (3, 7), elements=st.floats(-50, 50, width=32)), st.floats(-20, 20))
    def test_rows_sum_and_shift(self, x, c):
        s = softmax_rows(x)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(softmax_rows(x.astype(np.float64) + c), softmax_rows(x.astype(np.float64)), atol=1e-6)


class TestLayerNorm:
    def test_constant_row(self):
        out = layer_norm(np.full((1, 4), 3.0, np.float32), np.ones(4), np.zeros(4))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_hand_values(self):
        out = layer_norm(np.array([[1, 2, 3]], np.float32), np.ones(3), np.zeros(3), eps=0.0)
        np.testing.assert_allclose(out, [[-LN_123, 0.0, LN_123]], rtol=1e-6)

    def test_gamma_zero(self, rng):
        x = rng.standard_normal((3, 5)).astype(np.float32)
        out = layer_norm(x, np.zeros(5), np.full(5, 0.7))
        np.testing.assert_allclose(out, np.full((3, 5), 0.7), rtol=1e-7)


class TestGelu:
    def test_zero(self):
        assert gelu(np.array([0.0]))[0] == 0.0

    def test_one(self):
        assert gelu(np.array([1.0]))[0] == pytest.approx(GELU_AT_1, abs=1e-12)
        assert GELU_AT_1 == pytest.approx(0.5 * (1 + math.erf(1 / math.sqrt(2))), abs=1e-15)

    def test_tail(self):
        assert abs(gelu(np.array([-10.0]))[0]) < 1e-8

    def test_keeps_float32(self):
        assert gelu(np.ones(3, np.float32)).dtype == np.float32


class TestSingularValues:
    def test_diagonal(self):
        np.testing.assert_allclose(singular_values(np.diag([3.0, -4.0])), [4.0, 3.0], rtol=1e-12)

    def test_identity(self):
        np.testing.assert_allclose(singular_values(np.eye(5)), np.ones(5), rtol=1e-12)

    @pytest.mark.parametrize("shape", [(3, 3), (5, 2), (2, 7), (16, 16), (1, 4)])
    def test_eigen_oracle(self, rng, shape):
        m = rng.standard_normal(shape)
        sv = singular_values(m)
        assert len(sv) == min(shape)
        assert np.all(np.diff(sv) <= 0) and np.all(sv >= 0)
        np.testing.assert_allclose(sv, eig_oracle(m), rtol=1e-6, atol=1e-9)

    def test_rank_deficient(self, rng):
        m = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 8))
        sv = singular_values(m)
        assert np.all(np.isfinite(sv))
        np.testing.assert_allclose(sv[2:], 0.0, atol=1e-8)
        np.testing.assert_allclose(sv[:2], eig_oracle(m)[:2], rtol=1e-6)

    def test_transpose(self, rng):
        for n in range(1, 17, 3):
            m = rng.standard_normal((n, 16 - n + 1))
            np.testing.assert_allclose(singular_values(m), singular_values(m.T), atol=1e-6)

    def test_zero_matrix(self):
        np.testing.assert_array_equal(singular_values(np.zeros((3, 4))), np.zeros(3))

    def test_not_matrix(self):
        with pytest.raises(ShapeError):
            singular_values(np.ones(3))


class TestNuclearNorm:
    def test_zero(self):
        assert nuclear_norm(np.zeros((4, 4))) == 0.0

    def test_diagonal(self):
        assert nuclear_norm(np.diag([3.0, -4.0])) == pytest.approx(7.0, rel=1e-12)

    def test_random_8x8(self, rng):
        m = rng.standard_normal((8, 8))
        assert nuclear_norm(m) == pytest.approx(eig_oracle(m).sum(), rel=1e-6)

    def test_unitary_invariance(self, rng):
        for n in (3, 8, 16):
            m = rng.standard_normal((n, n))
            u, v = random_orthogonal(rng, n), random_orthogonal(rng, n)
            assert nuclear_norm(u @ m @ v) == pytest.approx(nuclear_norm(m), abs=1e-5)

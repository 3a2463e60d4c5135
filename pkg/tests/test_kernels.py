import numpy as np
import pytest

from meshspec.kernels import (
    MASK_CAUSAL,
    MASK_FULL,
    MASK_QUERY_OVER_CACHE,
    attention,
    embed,
    layer_norm,
    matmul,
    softmax,
    softmax_rows,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def naive_attention(q, k, v, mask):
    d = k.shape[1]
    scores = q @ k.T / np.sqrt(d)
    n_q, n_k = q.shape[0], k.shape[0]
    for i in range(n_q):
        if mask == MASK_CAUSAL:
            scores[i, i + 1 :] = -np.inf
        elif mask == MASK_QUERY_OVER_CACHE:
            scores[i, n_k - n_q + i + 1 :] = -np.inf
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = rng.normal(size=(3, 3))
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand_case(self):
        out = matmul([[1.0, 2.0], [3.0, 4.0]], [[0.0], [1.0]])
        assert np.array_equal(out, [[2.0], [4.0]])

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) <= 1e-12

    def test_oracle_on_100_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            m, k, n = rng.integers(1, 9, size=3)
            a = rng.normal(size=(m, k))
            b = rng.normal(size=(k, n))
            assert np.max(np.abs(matmul(a, b) - naive_matmul(a, b))) <= 1e-12

    def test_rows_independent_of_batch(self):
        # the determinism contract: a row's bits never depend on the batch
        rng = np.random.default_rng(3)
        a = rng.normal(size=(11, 16))
        b = rng.normal(size=(16, 13))
        full = matmul(a, b)
        for i in range(len(a)):
            assert np.array_equal(full[i], matmul(a[i : i + 1], b)[0])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestSoftmax:
    def test_uniform_row(self):
        out = softmax_rows([[0.0, 0.0, 0.0]])
        assert np.array_equal(out[0], np.full(3, 1.0) / 3.0)

    def test_large_values_do_not_overflow(self):
        out = softmax(np.array([1000.0, 0.0]))
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(1.0)
        assert out[1] < 1e-300

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        out = softmax_rows(rng.normal(size=(4, 6)) * 10)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=8)
        assert np.max(np.abs(softmax(x) - softmax(x + 7.25))) <= 1e-12


class TestLayerNorm:
    def test_zero_mean_unit_var(self):
        rng = np.random.default_rng(6)
        y = layer_norm(rng.normal(size=(5, 32)) * 3 + 1)
        assert np.max(np.abs(y.mean(axis=-1))) < 1e-12
        assert np.max(np.abs(y.std(axis=-1) - 1.0)) < 1e-4


class TestEmbed:
    def test_lookup(self):
        table = np.arange(12.0).reshape(4, 3)
        assert np.array_equal(embed(table, [2, 0]), [[6, 7, 8], [0, 1, 2]])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            embed(np.zeros((4, 3)), [4])


class TestAttention:
    def test_single_key_returns_value(self):
        rng = np.random.default_rng(7)
        q = rng.normal(size=(1, 8))
        k = rng.normal(size=(1, 8))
        v = rng.normal(size=(1, 5))
        assert np.array_equal(attention(q, k, v, MASK_FULL), v)

    def test_causal_first_query_sees_first_key_only(self):
        rng = np.random.default_rng(8)
        q = rng.normal(size=(1, 4))
        k = rng.normal(size=(3, 4))
        v = rng.normal(size=(3, 2))
        assert np.array_equal(attention(q, k, v, MASK_CAUSAL), v[:1])

    def test_matches_naive_reference(self):
        rng = np.random.default_rng(9)
        for mask in (MASK_FULL, MASK_CAUSAL, MASK_QUERY_OVER_CACHE):
            for _ in range(20):
                n_k = int(rng.integers(2, 10))
                n_q = int(rng.integers(1, n_k + 1))
                d, dv = int(rng.integers(2, 9)), int(rng.integers(1, 7))
                q = rng.normal(size=(n_q, d))
                k = rng.normal(size=(n_k, d))
                v = rng.normal(size=(n_k, dv))
                got = attention(q, k, v, mask)
                want = naive_attention(q, k, v, mask)
                assert np.max(np.abs(got - want)) <= 1e-10

    def test_causal_ignores_future_perturbation(self):
        rng = np.random.default_rng(10)
        q = rng.normal(size=(4, 6))
        k = rng.normal(size=(4, 6))
        v = rng.normal(size=(4, 3))
        base = attention(q, k, v, MASK_CAUSAL)
        k2, v2 = k.copy(), v.copy()
        k2[2:] += 100.0
        v2[2:] -= 50.0
        pert = attention(q, k2, v2, MASK_CAUSAL)
        assert np.array_equal(base[:2], pert[:2])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            attention(np.zeros((1, 3)), np.zeros((2, 4)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            attention(np.zeros((1, 3)), np.zeros((2, 3)), np.zeros((3, 2)))

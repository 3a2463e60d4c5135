"""Dense float64 kernels shared by every neural module.

All kernels are pure functions and deterministic: the same operand bits
always produce the same result bits. ``matmul`` additionally guarantees
that each output row depends only on the corresponding input row and the
right operand, never on how many rows are in the batch. That property is
what makes cached single-token decoding bit-identical to multi-token
decoding, which the exact-match verification loop relies on.
"""

from __future__ import annotations

import numpy as np

F64 = np.float64

MASK_CAUSAL = "causal"
MASK_FULL = "full"
MASK_QUERY_OVER_CACHE = "query_over_cache"


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=F64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product with batch-size-invariant rows.

    Each output row is computed as an independent vector-matrix product,
    so matmul(A, B)[i] is bit-identical to matmul(A[i:i+1], B)[0].
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=F64)
    for i in range(a.shape[0]):
        out[i] = np.dot(a[i], b)
    return out


def matvec(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """x @ w for a single row vector; the hot path of the decoder."""
    return np.dot(x, w)


def softmax(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector (max subtraction)."""
    x = np.asarray(x, dtype=F64)
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def softmax_rows(m) -> np.ndarray:
    m = as_matrix(m)
    out = np.empty_like(m)
    for i in range(m.shape[0]):
        out[i] = softmax(m[i])
    return out


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Non-affine layer normalization over the last axis."""
    x = np.asarray(x, dtype=F64)
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def embed(table: np.ndarray, ids) -> np.ndarray:
    """Row lookup into an embedding table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(f"token id out of range for vocab {table.shape[0]}")
    return table[ids].astype(F64, copy=True)


def _allowed_keys(mask: str, n_q: int, n_k: int, row: int) -> int:
    """Number of key positions query `row` may attend to."""
    if mask == MASK_FULL:
        return n_k
    if mask == MASK_CAUSAL:
        # query i sits at key position i (alignment at the start)
        if n_q > n_k:
            raise ValueError("causal mask requires n_q <= n_k")
        return row + 1
    if mask == MASK_QUERY_OVER_CACHE:
        # Queries occupy the last n_q key positions; query i sits at
        # key position n_k - n_q + i and may attend everything up to it.
        if n_q > n_k:
            raise ValueError("query_over_cache requires n_q <= n_k")
        return n_k - n_q + row + 1
    raise ValueError(f"unknown attention mask kind: {mask!r}")


def attention(q, k, v, mask: str = MASK_CAUSAL) -> np.ndarray:
    """softmax(q k^T / sqrt(d) + mask) v, one head, row-independent.

    Query rows are processed one at a time so cached decoding and batch
    evaluation agree exactly.
    """
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"query/key dim mismatch: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ValueError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    scale = 1.0 / np.sqrt(F64(k.shape[1]))
    out = np.empty((q.shape[0], v.shape[1]), dtype=F64)
    for i in range(q.shape[0]):
        n = _allowed_keys(mask, q.shape[0], k.shape[0], i)
        scores = np.dot(k[:n], q[i]) * scale
        probs = softmax(scores)
        out[i] = np.dot(probs, v[:n])
    return out

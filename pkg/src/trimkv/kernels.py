"""Deterministic float32 numeric kernels shared by the model and the test oracles.

All kernels validate their inputs, compute in float32, and are pure functions:
identical inputs produce identical outputs across runs of the same build.
Matrix products use numpy's BLAS path, which is run-to-run deterministic for a
fixed installation; the test suite checks every kernel against naive loop
oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

# A Matrix is a 2-D float32 ndarray, row-major, all values finite.
Matrix = np.ndarray


def as_matrix(a, name: str = "matrix") -> Matrix:
    """Validate and coerce `a` to a finite 2-D float32 array."""
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name}: expected a 2-D matrix, got {arr.ndim}-D")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{name}: contains non-finite values")
    return arr


def matmul(a, b) -> Matrix:
    """Matrix product with dimension validation."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(
            f"matmul: inner dimensions disagree ({a.shape} x {b.shape})"
        )
    return a @ b


def softmax_row(x) -> Matrix:
    """Row-wise softmax with max-subtraction for stability."""
    x = as_matrix(x, "softmax input")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def rmsnorm(x, weight, eps: float = 1e-6) -> Matrix:
    """Root-mean-square normalization over the last axis, scaled by `weight`."""
    x = as_matrix(x, "rmsnorm input")
    weight = np.asarray(weight, dtype=np.float32)
    if weight.ndim != 1 or weight.shape[0] != x.shape[1]:
        raise InvalidInputError("rmsnorm: weight length must equal row width")
    if not np.isfinite(weight).all():
        raise InvalidInputError("rmsnorm: weight contains non-finite values")
    ms = np.mean(x * x, axis=1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps)) * weight).astype(np.float32)


def rotary_tables(positions, head_dim: int, base: float = 10000.0):
    """Cosine/sine tables for rotary position application.

    Angles are computed in float64 and cast to float32 so both the runtime
    path and the dense reference agree bit-for-bit.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if head_dim % 2 != 0:
        raise InvalidInputError("rotary: head_dim must be even")
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def apply_rotary(x, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate interleaved (even, odd) pairs of the last axis by position.

    `x` has shape [..., T, head_dim]; each token keeps its ORIGINAL absolute
    position, so pruned attention stays a strict restriction of dense
    attention. Position 0 is the identity rotation.
    """
    x = np.asarray(x, dtype=np.float32)
    if not np.isfinite(x).all():
        raise InvalidInputError("rotary: input contains non-finite values")
    head_dim = x.shape[-1]
    cos, sin = rotary_tables(positions, head_dim, base)
    if x.shape[-2] != cos.shape[0]:
        raise InvalidInputError("rotary: positions length must match token axis")
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass(frozen=True)
class AttentionInputs:
    """Per-head query/key/value tensors plus absolute token positions.

    Shapes: queries [H, Tq, d], keys/values [H, Tk, d]. Positions are the
    tokens' original absolute indices and must be strictly increasing within
    each retained subsequence. The mask is causal: a query may attend only to
    key positions <= its own position.
    """

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    query_positions: np.ndarray
    key_positions: np.ndarray

    def validate(self) -> None:
        q, k, v = self.queries, self.keys, self.values
        if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
            raise InvalidInputError("attention: q/k/v must be [heads, tokens, dim]")
        if q.shape[0] != k.shape[0] or k.shape != v.shape:
            raise InvalidInputError("attention: per-head dimensions disagree")
        if q.shape[2] != k.shape[2]:
            raise InvalidInputError("attention: query/key head dims disagree")
        qp = np.asarray(self.query_positions, dtype=np.int64)
        kp = np.asarray(self.key_positions, dtype=np.int64)
        if qp.shape[0] != q.shape[1] or kp.shape[0] != k.shape[1]:
            raise InvalidInputError("attention: positions do not match token counts")
        if qp.size > 1 and not (np.diff(qp) > 0).all():
            raise InvalidInputError("attention: query positions must be strictly increasing")
        if kp.size > 1 and not (np.diff(kp) > 0).all():
            raise InvalidInputError("attention: key positions must be strictly increasing")
        for arr, name in ((q, "queries"), (k, "keys"), (v, "values")):
            if not np.isfinite(arr).all():
                raise InvalidInputError(f"attention: {name} contain non-finite values")


def causal_attention(inp: AttentionInputs, scale: float, row_chunk: int = 512) -> Matrix:
    """Per-head softmax(scale * Q K^T + causal mask) V, heads concatenated.

    Returns [Tq, H * d]. Query rows are processed in chunks so long prompts
    never materialize the full score matrix at once. A query whose position
    precedes every key position has an empty allowed set and is rejected.
    """
    inp.validate()
    q, k, v = inp.queries, inp.keys, inp.values
    qp = np.asarray(inp.query_positions, dtype=np.int64)
    kp = np.asarray(inp.key_positions, dtype=np.int64)
    n_heads, n_q, head_dim = q.shape
    if k.shape[1] == 0 or (qp.size and qp.min() < kp[0]):
        raise InvalidInputError("attention: some query has an empty allowed key set")
    scale = np.float32(scale)
    out = np.empty((n_q, n_heads * head_dim), dtype=np.float32)
    for start in range(0, n_q, row_chunk):
        stop = min(start + row_chunk, n_q)
        allowed = kp[None, :] <= qp[start:stop, None]
        for h in range(n_heads):
            scores = (q[h, start:stop] @ k[h].T) * scale
            scores = np.where(allowed, scores, np.float32(-np.inf))
            scores -= scores.max(axis=1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=1, keepdims=True)
            out[start:stop, h * head_dim : (h + 1) * head_dim] = weights @ v[h]
    return out

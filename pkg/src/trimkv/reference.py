"""Monolithic dense reference forward.

An intentionally independent implementation of the same architecture: it
recomputes the whole sequence in one pass per layer with inline norm, rotary,
softmax, and attention code, sharing only the weight tensors with the runtime
path. The engine and kernels are tested against it; keep it free of imports
from `kernels` or `engine`.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .model import RMS_EPS, ROTARY_BASE, WeightSet


def _norm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(RMS_EPS)) * w).astype(np.float32)


def _rotate(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    # x: [T, H, d] with interleaved (even, odd) rotary pairs.
    d = x.shape[-1]
    inv_freq = ROTARY_BASE ** (-np.arange(d // 2, dtype=np.float64) * 2.0 / d)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.cos(angles).astype(np.float32)[:, None, :]
    sin = np.sin(angles).astype(np.float32)[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def dense_logits(
    ws: WeightSet,
    token_ids,
    remove_token: Optional[int] = None,
    remove_from_layer: Optional[int] = None,
    positions=None,
) -> np.ndarray:
    """Full-sequence forward; returns logits [T', vocab].

    If `remove_token` / `remove_from_layer` are given, that token's hidden
    state is deleted just before the named layer runs and stays absent from
    every later layer (the probing experiment). `remove_from_layer ==
    n_layers` removes nothing. `positions` overrides the default 0..T-1
    absolute indices (for subsequence oracles); remaining tokens always keep
    their original absolute positions.
    """
    cfg = ws.cfg
    ids = np.asarray(token_ids, dtype=np.int64)
    x = ws["embed"][ids].astype(np.float32)
    if positions is None:
        positions = np.arange(ids.size, dtype=np.int64)
    else:
        positions = np.asarray(positions, dtype=np.int64)
    n_heads, head_dim = cfg.n_heads, cfg.head_dim
    scale = np.float32(1.0 / np.sqrt(head_dim))

    for layer in range(cfg.n_layers):
        if remove_from_layer == layer and remove_token is not None:
            keep = positions != remove_token
            x, positions = x[keep], positions[keep]
        t = x.shape[0]
        h = _norm(x, ws[f"layer{layer}.attn_norm"])
        q = (h @ ws[f"layer{layer}.wq"]).reshape(t, n_heads, head_dim)
        k = (h @ ws[f"layer{layer}.wk"]).reshape(t, n_heads, head_dim)
        v = (h @ ws[f"layer{layer}.wv"]).reshape(t, n_heads, head_dim)
        q = _rotate(q, positions)
        k = _rotate(k, positions)
        allowed = positions[None, :] <= positions[:, None]
        attn = np.empty((t, n_heads * head_dim), dtype=np.float32)
        for head in range(n_heads):
            scores = (q[:, head, :] @ k[:, head, :].T) * scale
            scores = np.where(allowed, scores, np.float32(-np.inf))
            scores -= scores.max(axis=1, keepdims=True)
            w = np.exp(scores)
            w /= w.sum(axis=1, keepdims=True)
            attn[:, head * head_dim : (head + 1) * head_dim] = w @ v[:, head, :]
        x = x + attn @ ws[f"layer{layer}.wo"]
        h = _norm(x, ws[f"layer{layer}.ffn_norm"])
        inner = h @ ws[f"layer{layer}.w1"]
        inner = (inner / (1.0 + np.exp(-inner))).astype(np.float32)
        x = x + inner @ ws[f"layer{layer}.w2"]

    return _norm(x, ws["final_norm"]) @ ws["unembed"]


def probe_divergence(
    ws: WeightSet, token_ids, remove_token: int, remove_from_layer: int
) -> tuple[float, float]:
    """Max-abs and cosine divergence of the final-row logits after removal.

    The dense run's last row is compared against the pruned run's last
    remaining row, i.e. each run's own next-token distribution.
    """
    base = dense_logits(ws, token_ids)[-1]
    pruned = dense_logits(ws, token_ids, remove_token, remove_from_layer)[-1]
    max_abs = float(np.max(np.abs(base - pruned)))
    denom = float(np.linalg.norm(base) * np.linalg.norm(pruned))
    cosine = float(base @ pruned / denom) if denom > 0 else float("nan")
    return max_abs, cosine

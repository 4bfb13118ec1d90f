"""Toy pre-norm decoder transformer with deterministic seeded weights.

Each block is a plain pre-norm decoder layer: RMS-norm -> multi-head attention
with rotary positions -> residual, RMS-norm -> 2-layer SiLU FFN -> residual.
Inputs are integer token ids; there is no tokenizer. Weights are either drawn
from a documented deterministic generator (see `init_weights`) or loaded from
the raw weights file format (see `save_weights` / `load_weights`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import ConfigError, InvalidInputError, WeightsFormatError
from .kernels import AttentionInputs, apply_rotary, causal_attention, matmul, rmsnorm

RMS_EPS = 1e-6
ROTARY_BASE = 10000.0


@dataclass(frozen=True)
class ModelConfig:
    """Transformer dimensions. hidden dim = n_heads * head_dim.

    `kv_bytes_per_elem` feeds the cost model's byte accounting only (the KV
    cache of a deployed model would be fp16); compute here is float32.
    """

    n_layers: int
    n_heads: int
    head_dim: int
    ffn_dim: int
    vocab_size: int
    kv_bytes_per_elem: int = 2
    seed: int = 0

    @property
    def hidden_dim(self) -> int:
        return self.n_heads * self.head_dim

    def validate(self) -> None:
        for name in ("n_layers", "n_heads", "head_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.kv_bytes_per_elem < 1:
            raise ConfigError("kv_bytes_per_elem must be >= 1")
        if self.head_dim % 2 != 0:
            raise ConfigError("head_dim must be even (rotary pairs)")


@dataclass
class LayerActivations:
    """Hidden states over the currently retained tokens of one layer.

    `positions` are the tokens' original absolute indices, strictly
    increasing; rows of `hidden` align with them one-to-one.
    """

    layer: int
    hidden: np.ndarray
    positions: np.ndarray

    def validate(self) -> None:
        if self.hidden.ndim != 2:
            raise InvalidInputError("activations: hidden must be 2-D")
        if self.hidden.shape[0] != self.positions.shape[0]:
            raise InvalidInputError("activations: rows must match positions")
        if self.positions.size > 1 and not (np.diff(self.positions) > 0).all():
            raise InvalidInputError("activations: positions must be strictly increasing")


@dataclass
class KvContext:
    """Previously cached per-layer keys/values the new tokens may attend to."""

    keys: np.ndarray  # [H, T, d]
    values: np.ndarray
    positions: np.ndarray


# ---------------------------------------------------------------------------
# Deterministic weight generation.
#
# Per-tensor stream: seed64 = FNV-1a(64) over the UTF-8 bytes of
# "{config.seed}:{tensor_name}" (0 is remapped to the FNV offset basis).
# Element j of the tensor draws bits = splitmix64(seed64 + j), an
# xorshift-multiply mixer, and maps them to u = (bits >> 11) * 2^-53 in [0, 1).
# 2-D tensors are uniform on +-sqrt(6 / (fan_in + fan_out)); 1-D norm gains
# are 1 + 0.05 * (2u - 1). Values are computed in float64 and cast to float32.
# ---------------------------------------------------------------------------

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tensor_seed(seed: int, name: str) -> int:
    h = fnv1a64(f"{seed}:{name}")
    return h if h != 0 else _FNV_OFFSET


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def tensor_uniforms(seed: int, name: str, count: int) -> np.ndarray:
    """Uniform [0, 1) float64 draws for one named tensor."""
    base = np.uint64(tensor_seed(seed, name))
    idx = np.arange(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        bits = _splitmix64(base + idx)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def tensor_layout(cfg: ModelConfig) -> Iterator[tuple[str, tuple[int, ...]]]:
    d = cfg.hidden_dim
    yield "embed", (cfg.vocab_size, d)
    for i in range(cfg.n_layers):
        yield f"layer{i}.attn_norm", (d,)
        yield f"layer{i}.wq", (d, d)
        yield f"layer{i}.wk", (d, d)
        yield f"layer{i}.wv", (d, d)
        yield f"layer{i}.wo", (d, d)
        yield f"layer{i}.ffn_norm", (d,)
        yield f"layer{i}.w1", (d, cfg.ffn_dim)
        yield f"layer{i}.w2", (cfg.ffn_dim, d)
    yield "final_norm", (d,)
    yield "unembed", (d, cfg.vocab_size)


class WeightSet:
    """Immutable-by-convention mapping of tensor name -> float32 array."""

    def __init__(self, cfg: Optional[ModelConfig], tensors: dict[str, np.ndarray]):
        self.cfg = cfg
        self._tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()


def init_weights(cfg: ModelConfig) -> WeightSet:
    """Fill every tensor from the documented deterministic generator."""
    cfg.validate()
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_layout(cfg):
        count = int(np.prod(shape))
        u = tensor_uniforms(cfg.seed, name, count)
        if len(shape) == 1:
            vals = 1.0 + 0.05 * (2.0 * u - 1.0)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            vals = (2.0 * u - 1.0) * limit
        tensors[name] = vals.astype(np.float32).reshape(shape)
    return WeightSet(cfg, tensors)


# ---------------------------------------------------------------------------
# Raw weights file format.
#
# [8 bytes] little-endian unsigned header length N
# [N bytes] UTF-8 JSON: {"config": {...} | null,
#                        "tensors": [{"name", "shape", "dtype": "f32",
#                                     "offset", "nbytes"}, ...]}
# [payload] packed little-endian float32; offsets are relative to the
#           payload start.
# ---------------------------------------------------------------------------


def save_weights(ws: WeightSet, path: str) -> None:
    meta_tensors = []
    payload = bytearray()
    for name, arr in ws.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        meta_tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    cfg = None
    if ws.cfg is not None:
        cfg = {
            "n_layers": ws.cfg.n_layers,
            "n_heads": ws.cfg.n_heads,
            "head_dim": ws.cfg.head_dim,
            "ffn_dim": ws.cfg.ffn_dim,
            "vocab_size": ws.cfg.vocab_size,
            "kv_bytes_per_elem": ws.cfg.kv_bytes_per_elem,
            "seed": ws.cfg.seed,
        }
    header = json.dumps({"config": cfg, "tensors": meta_tensors}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(bytes(payload))


def load_weights(path: str) -> WeightSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise WeightsFormatError("weights file shorter than its length header")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + header_len:
        raise WeightsFormatError("weights file truncated inside the metadata header")
    try:
        meta = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"metadata is not valid UTF-8 JSON: {exc}") from exc
    payload = blob[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for spec in meta.get("tensors", []):
        name = spec.get("name", "<unnamed>")
        if spec.get("dtype") != "f32":
            raise WeightsFormatError(f"tensor {name}: unsupported dtype {spec.get('dtype')}")
        shape = tuple(int(s) for s in spec["shape"])
        nbytes = int(spec["nbytes"])
        offset = int(spec["offset"])
        if nbytes != int(np.prod(shape)) * 4:
            raise WeightsFormatError(f"tensor {name}: nbytes does not match shape {shape}")
        if offset < 0 or offset + nbytes > len(payload):
            raise WeightsFormatError(f"tensor {name}: payload truncated")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    cfg = None
    if meta.get("config"):
        cfg = ModelConfig(**meta["config"])
        expected = dict(tensor_layout(cfg))
        for name, shape in expected.items():
            if name not in tensors:
                raise WeightsFormatError(f"tensor {name}: missing from file")
            if tensors[name].shape != shape:
                raise WeightsFormatError(
                    f"tensor {name}: shape {tensors[name].shape} != expected {shape}"
                )
    return WeightSet(cfg, tensors)


# ---------------------------------------------------------------------------
# Forward pieces. The attention half and FFN half are exposed separately so
# the engine can drop hidden rows between them at pruning layers.
# ---------------------------------------------------------------------------


def embed_tokens(ws: WeightSet, token_ids, positions=None) -> LayerActivations:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise InvalidInputError("token ids must be a non-empty 1-D sequence")
    cfg = ws.cfg
    if cfg is not None and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InvalidInputError("token id out of vocabulary range")
    if positions is None:
        positions = np.arange(ids.size, dtype=np.int64)
    hidden = ws["embed"][ids].astype(np.float32)
    return LayerActivations(0, hidden, np.asarray(positions, dtype=np.int64))


def _split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    t = x.shape[0]
    return np.ascontiguousarray(x.reshape(t, n_heads, head_dim).transpose(1, 0, 2))


def project_qkv(ws: WeightSet, layer: int, acts: LayerActivations):
    """Norm, QKV projection, and rotary for the retained tokens.

    Returns post-rotary (queries, keys, values), each [H, T, d].
    """
    cfg = ws.cfg
    acts.validate()
    h = rmsnorm(acts.hidden, ws[f"layer{layer}.attn_norm"], RMS_EPS)
    q = _split_heads(matmul(h, ws[f"layer{layer}.wq"]), cfg.n_heads, cfg.head_dim)
    k = _split_heads(matmul(h, ws[f"layer{layer}.wk"]), cfg.n_heads, cfg.head_dim)
    v = _split_heads(matmul(h, ws[f"layer{layer}.wv"]), cfg.n_heads, cfg.head_dim)
    q = apply_rotary(q, acts.positions, ROTARY_BASE)
    k = apply_rotary(k, acts.positions, ROTARY_BASE)
    return q, k, v


def attend(
    ws: WeightSet,
    layer: int,
    acts: LayerActivations,
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    context: Optional[KvContext] = None,
) -> LayerActivations:
    """Causal attention over (context plus own new KV), output residual."""
    if context is not None and context.positions.size:
        if np.intersect1d(context.positions, acts.positions).size:
            raise InvalidInputError("attention: context positions collide with new tokens")
        all_k = np.concatenate([context.keys, k], axis=1)
        all_v = np.concatenate([context.values, v], axis=1)
        all_pos = np.concatenate([context.positions, acts.positions])
        order = np.argsort(all_pos, kind="stable")
        all_k, all_v, all_pos = all_k[:, order], all_v[:, order], all_pos[order]
    else:
        all_k, all_v, all_pos = k, v, acts.positions

    attn = causal_attention(
        AttentionInputs(q, all_k, all_v, acts.positions, all_pos),
        scale=1.0 / np.sqrt(ws.cfg.head_dim),
    )
    hidden = acts.hidden + matmul(attn, ws[f"layer{layer}.wo"])
    return LayerActivations(acts.layer, hidden, acts.positions)


def attention_half(
    ws: WeightSet, layer: int, acts: LayerActivations, context: Optional[KvContext] = None
):
    """Norm, QKV projection, rotary, causal attention, output residual.

    Returns (acts_after_attention, new_keys, new_values, queries), the last
    three shaped [H, T, d] over the tokens in `acts` (post-rotary q/k).
    """
    q, k, v = project_qkv(ws, layer, acts)
    attn_acts = attend(ws, layer, acts, q, k, v, context)
    return attn_acts, k, v, q


def _silu(x: np.ndarray) -> np.ndarray:
    return (x / (1.0 + np.exp(-x))).astype(np.float32)


def ffn_half(ws: WeightSet, layer: int, acts: LayerActivations) -> LayerActivations:
    """Norm, 2-layer SiLU FFN, residual. Purely per-token."""
    h = rmsnorm(acts.hidden, ws[f"layer{layer}.ffn_norm"], RMS_EPS)
    inner = _silu(matmul(h, ws[f"layer{layer}.w1"]))
    hidden = acts.hidden + matmul(inner, ws[f"layer{layer}.w2"])
    return LayerActivations(acts.layer, hidden, acts.positions)


def layer_forward(
    ws: WeightSet, layer: int, acts: LayerActivations, context: Optional[KvContext] = None
):
    """One full decoder layer over the retained tokens.

    Returns (activations entering layer+1, new K, new V, queries). KV rows are
    emitted for exactly the tokens in `acts`.
    """
    attn_acts, k, v, q = attention_half(ws, layer, acts, context)
    out = ffn_half(ws, layer, attn_acts)
    return LayerActivations(layer + 1, out.hidden, out.positions), k, v, q


def final_logits(ws: WeightSet, acts: LayerActivations) -> np.ndarray:
    """Final RMS-norm and unembedding; returns [T, vocab]."""
    h = rmsnorm(acts.hidden, ws["final_norm"], RMS_EPS)
    return matmul(h, ws["unembed"])

"""Closed-form memory accounting, FLOP estimates, and a pipeline timeline.

Memory: prompt KV bytes are summed per layer at that layer's retained token
count. Layers before the first pruning layer hold the full prompt; a pruning
layer itself is accounted at the budget of the stage it opens (its surplus KV
is offloaded the moment the stage's active set is chosen). "GB" figures are
GiB (2^30 bytes), which reproduces the published table cells exactly.

Timeline: two tracks (compute, transfer) in abstract time units. A stage's
fetch starts when its plan is known (end of attention at the pruning layer)
and must finish before the next attention begins, so the hiding window is
FFN(p) + QKV(p+1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .errors import ConfigError, InvalidInputError

GIB = float(2**30)


@dataclass(frozen=True)
class MemSpec:
    """Inputs to the KV byte accounting."""

    n_layers: int
    kv_heads: int
    head_dim: int
    kv_bytes_per_elem: int
    prompt_len: int
    pruning_layers: tuple[int, ...] = ()
    token_budgets: tuple[int, ...] = ()

    def validate(self) -> None:
        for name in ("n_layers", "kv_heads", "head_dim", "kv_bytes_per_elem", "prompt_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.pruning_layers) != len(self.token_budgets):
            raise ConfigError("pruning_layers and token_budgets lengths differ")
        layers = self.pruning_layers
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigError("pruning layers must be strictly increasing")
        if layers and (layers[0] < 0 or layers[-1] >= self.n_layers):
            raise ConfigError("pruning layers out of range")
        budgets = self.token_budgets
        if any(b2 >= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ConfigError("token budgets must be strictly decreasing")


def retained_tokens(spec: MemSpec, layer: int) -> int:
    """Tokens whose KV this layer keeps resident after pruning settles.

    Full prompt before the first pruning layer; from a pruning layer until the
    next one, the budget of the stage it opens (capped by the prompt length).
    """
    count = spec.prompt_len
    for pruning_layer, budget in zip(spec.pruning_layers, spec.token_budgets):
        if layer >= pruning_layer:
            count = min(spec.prompt_len, budget)
    return count


def tokens_entering(spec: MemSpec, layer: int) -> int:
    """Tokens whose hidden states enter this layer during prefill.

    A pruning layer still processes its full incoming set; the drop takes
    effect after its attention.
    """
    if layer == 0:
        return spec.prompt_len
    return retained_tokens(spec, layer - 1)


def prompt_kv_bytes(spec: MemSpec) -> tuple[int, float]:
    """Total prompt KV bytes across layers; returns (bytes, GiB)."""
    spec.validate()
    per_token = spec.kv_heads * spec.head_dim * 2 * spec.kv_bytes_per_elem
    total = sum(retained_tokens(spec, l) * per_token for l in range(spec.n_layers))
    return total, total / GIB


@dataclass(frozen=True)
class MemoryTableRow:
    prompt_len: int
    full_gib: float
    pruned_gib: float
    saving_pct: float


def memory_table(spec: MemSpec, prompt_lens: Sequence[int]) -> list[MemoryTableRow]:
    rows = []
    for n in prompt_lens:
        pruned = MemSpec(
            spec.n_layers,
            spec.kv_heads,
            spec.head_dim,
            spec.kv_bytes_per_elem,
            n,
            spec.pruning_layers,
            spec.token_budgets,
        )
        full = MemSpec(spec.n_layers, spec.kv_heads, spec.head_dim, spec.kv_bytes_per_elem, n)
        full_bytes, full_gib = prompt_kv_bytes(full)
        pruned_bytes, pruned_gib = prompt_kv_bytes(pruned)
        saving = 100.0 * (1.0 - pruned_bytes / full_bytes)
        rows.append(MemoryTableRow(n, full_gib, pruned_gib, saving))
    return rows


def format_memory_table(rows: Sequence[MemoryTableRow]) -> str:
    width = max(8, *(len(f"{r.prompt_len}") + 2 for r in rows))
    cells = lambda vals, fmt: "".join(f"{fmt.format(v):>{width}}" for v in vals)
    lines = [
        "prompt tokens " + cells([r.prompt_len for r in rows], "{}"),
        "full kv (GiB) " + cells([r.full_gib for r in rows], "{:.2f}"),
        "pruned  (GiB) " + cells([r.pruned_gib for r in rows], "{:.2f}"),
        "saving    (%) " + cells([r.saving_pct for r in rows], "{:.1f}"),
    ]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# FLOP accounting. Conventions (documented so the test oracle can match):
# per layer with T_in tokens entering and T_out tokens after the drop,
#   projections (q,k,v,o):  8 * T_in * D^2
#   attention (scores+AV):  4 * D * T_in * (T_in + 1) / 2   (causal pairs)
#   FFN (two matmuls):      4 * T_out * D * F
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlopSplit:
    proj: int
    attn: int
    ffn: int

    @property
    def total(self) -> int:
        return self.proj + self.attn + self.ffn


@dataclass(frozen=True)
class FlopReport:
    dense: FlopSplit
    pruned: FlopSplit
    ratio: float


def prefill_flops(spec: MemSpec, hidden_dim: int, ffn_dim: int) -> FlopReport:
    """Dense vs pruned prefill FLOPs and their ratio."""
    spec.validate()
    if hidden_dim < 1 or ffn_dim < 1:
        raise ConfigError("hidden_dim and ffn_dim must be >= 1")

    def split(pruned: bool) -> FlopSplit:
        proj = attn = ffn = 0
        for layer in range(spec.n_layers):
            t_in = tokens_entering(spec, layer) if pruned else spec.prompt_len
            t_out = retained_tokens(spec, layer) if pruned else spec.prompt_len
            proj += 8 * t_in * hidden_dim * hidden_dim
            attn += 4 * hidden_dim * (t_in * (t_in + 1) // 2)
            ffn += 4 * t_out * hidden_dim * ffn_dim
        return FlopSplit(proj, attn, ffn)

    dense = split(pruned=False)
    pruned = split(pruned=True)
    return FlopReport(dense, pruned, pruned.total / dense.total)


# ---------------------------------------------------------------------------
# Pipeline timeline.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimelineEvent:
    track: str  # "compute" | "transfer"
    label: str  # "qkv" | "attn" | "ffn" | "stall" | "fetch"
    layer: int
    start: float
    end: float


@dataclass(frozen=True)
class TimelineParams:
    """Per-layer compute costs and per-stage fetch plans, in abstract units."""

    n_layers: int
    t_qkv: float
    t_attn: float
    t_ffn: float
    t_fetch_blk: float
    fetch_blocks: Mapping[int, int] = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        for name in ("t_qkv", "t_attn", "t_ffn", "t_fetch_blk"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for layer, blocks in self.fetch_blocks.items():
            if not (0 <= layer < self.n_layers):
                raise ConfigError(f"fetch plan layer {layer} out of range")
            if blocks < 0:
                raise ConfigError("fetch plan block counts must be non-negative")


@dataclass(frozen=True)
class TimelineResult:
    events: tuple[TimelineEvent, ...]
    makespan: float
    stall_total: float


def simulate_timeline(params: TimelineParams, placement: str = "overlap") -> TimelineResult:
    """Simulate the compute/transfer pipeline.

    placement="overlap": a fetch planned at layer p starts at the end of
    attention(p) and only stalls the pipeline if it outlasts FFN(p) +
    QKV(p+1). placement="serial" models the on-demand alternative: selection
    happens after QKV at the same layer and attention waits for the whole
    fetch. Integer inputs stay exact.
    """
    params.validate()
    if placement not in ("overlap", "serial"):
        raise InvalidInputError(f"unknown placement {placement!r}")
    events: list[TimelineEvent] = []
    compute = 0.0
    transfer_free = 0.0
    stall_total = 0.0
    pending_fetch_end: Optional[float] = None

    for layer in range(params.n_layers):
        events.append(TimelineEvent("compute", "qkv", layer, compute, compute + params.t_qkv))
        compute += params.t_qkv

        fetch_cost = params.fetch_blocks.get(layer, 0) * params.t_fetch_blk
        if placement == "serial" and fetch_cost > 0:
            start = max(compute, transfer_free)
            events.append(TimelineEvent("transfer", "fetch", layer, start, start + fetch_cost))
            transfer_free = start + fetch_cost
            if transfer_free > compute:
                events.append(TimelineEvent("compute", "stall", layer, compute, transfer_free))
                stall_total += transfer_free - compute
                compute = transfer_free

        if pending_fetch_end is not None:
            if pending_fetch_end > compute:
                events.append(
                    TimelineEvent("compute", "stall", layer, compute, pending_fetch_end)
                )
                stall_total += pending_fetch_end - compute
                compute = pending_fetch_end
            pending_fetch_end = None

        events.append(TimelineEvent("compute", "attn", layer, compute, compute + params.t_attn))
        compute += params.t_attn

        if placement == "overlap" and fetch_cost > 0:
            start = max(compute, transfer_free)
            events.append(TimelineEvent("transfer", "fetch", layer, start, start + fetch_cost))
            transfer_free = start + fetch_cost
            pending_fetch_end = transfer_free

        events.append(TimelineEvent("compute", "ffn", layer, compute, compute + params.t_ffn))
        compute += params.t_ffn

    # A fetch planned at the last layer has no next attention to stall; it can
    # still extend the makespan on the transfer track.
    makespan = max([compute] + [e.end for e in events])
    return TimelineResult(tuple(events), makespan, stall_total)


def format_timeline(result: TimelineResult) -> str:
    lines = [f"{'track':<10}{'label':<8}{'layer':>6}{'start':>12}{'end':>12}"]
    for e in result.events:
        lines.append(f"{e.track:<10}{e.label:<8}{e.layer:>6}{e.start:>12g}{e.end:>12g}")
    lines.append(f"makespan {result.makespan:g}  stall_total {result.stall_total:g}")
    return "\n".join(lines)

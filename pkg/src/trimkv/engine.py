"""Inference engine: staged prefill, decode with overlap-aware swapping.

Prefill runs every layer over the currently retained prompt tokens. At each
pruning layer the decision happens immediately after attention: representative
keys are built from that layer's (post-rotary) keys, the probe is the mean of
the last `window` retained queries, the stage's active set is installed, and
non-selected blocks lose their hidden rows before the FFN. Their
post-attention rows are checkpointed for later revival and their KV at the
pruning layer is offloaded.

During decode the new token updates each pruning layer's query window;
scoring and the swap decision happen after that layer's attention, and a
triggered ticket is awaited only at the next attention that consumes stage
KV, so the transfer overlaps FFN(p) + QKV(p+1). Response-token KV is appended
at every layer, never scored, never offloaded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .blockindex import (
    BlockTable,
    LocalQueryWindow,
    PruneSchedule,
    RepKeys,
    build_rep_keys,
    partition_blocks,
    score_blocks,
    select_candidates,
)
from .errors import ConfigError, InvalidInputError
from .model import (
    KvContext,
    LayerActivations,
    ModelConfig,
    WeightSet,
    attend,
    attention_half,
    embed_tokens,
    ffn_half,
    final_logits,
    init_weights,
    project_qkv,
)
from .swap import SwapPolicy, plan_swap
from .tiermem import KvBlockEntry, TierStore, TransferEngine, TransferOp, kv_entry_bytes
from .trace import TraceWriter, sorted_blocks

# Selection hook signature (testing aid): (step, stage, scores, eligible,
# budget) -> candidate block ids. Must contain the sink.
SelectionHook = Callable[[int, int, dict, Sequence[int], int], Sequence[int]]


@dataclass(frozen=True)
class EngineMode:
    """Decode-time materialization policy.

    "revival" scores every block whose KV exists at the pruning layer itself
    and recomputes missing deeper-layer KV from boundary checkpoints;
    "strict" scores only blocks fully materialized through the stage, so no
    recompute (and no checkpoint lookup) can ever happen.
    """

    mode: str = "revival"
    decode_block_budgets: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.mode not in ("revival", "strict"):
            raise ConfigError(f"unknown engine mode {self.mode!r}")


@dataclass
class StageState:
    """One pruning stage: its layer range, budget, and current active set."""

    index: int  # 1-based; stage 0 is the preserve region
    pruning_layer: int
    layer_end: int  # exclusive
    block_budget: int
    decode_budget: int
    active: tuple[int, ...] = ()
    prefill_active: tuple[int, ...] = ()

    @property
    def layers(self) -> range:
        return range(self.pruning_layer, self.layer_end)


class _ResponseKv:
    """Per-layer growing KV of generated tokens (never scored or offloaded)."""

    def __init__(self, n_heads: int, head_dim: int):
        self.keys = np.zeros((n_heads, 0, head_dim), dtype=np.float32)
        self.values = np.zeros((n_heads, 0, head_dim), dtype=np.float32)
        self.positions = np.zeros(0, dtype=np.int64)

    def append(self, k: np.ndarray, v: np.ndarray, positions: np.ndarray) -> None:
        self.keys = np.concatenate([self.keys, k], axis=1)
        self.values = np.concatenate([self.values, v], axis=1)
        self.positions = np.concatenate([self.positions, positions])

    @property
    def rows(self) -> int:
        return int(self.positions.size)


class InferenceEngine:
    """Single-request engine wiring the model, block index, and tier store."""

    def __init__(
        self,
        cfg: ModelConfig,
        schedule: Optional[PruneSchedule] = None,
        policy: Optional[SwapPolicy] = None,
        mode: Optional[EngineMode] = None,
        weights: Optional[WeightSet] = None,
        trace: Optional[TraceWriter] = None,
        fast_bytes_cap: Optional[int] = None,
        transfer_latency_s: float = 0.0,
        selection_hook: Optional[SelectionHook] = None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.schedule = schedule or PruneSchedule.disabled()
        self.schedule.validate(cfg.n_layers)
        self.policy = policy or SwapPolicy()
        self.mode = mode or EngineMode()
        self.weights = weights if weights is not None else init_weights(cfg)
        if self.weights.cfg is not None and self.weights.cfg != cfg:
            raise ConfigError("weights were built for a different model config")
        self.trace = trace if trace is not None else TraceWriter()
        self.store = TierStore(fast_bytes_cap)
        self.transfers = TransferEngine(self.store, byte_latency_s=transfer_latency_s)
        self.selection_hook = selection_hook

        overrides = self.mode.decode_block_budgets
        if overrides is not None and len(overrides) != self.schedule.n_stages:
            raise ConfigError("decode_block_budgets must name every stage")
        self.stages: list[StageState] = []
        layers = self.schedule.pruning_layers
        for i, pruning_layer in enumerate(layers):
            layer_end = layers[i + 1] if i + 1 < len(layers) else cfg.n_layers
            budget = self.schedule.block_budget(i)
            decode_budget = budget if overrides is None else overrides[i]
            if not (1 <= decode_budget <= budget):
                raise ConfigError(
                    f"decode budget for stage {i + 1} must lie in [1, {budget}]"
                )
            self.stages.append(
                StageState(i + 1, pruning_layer, layer_end, budget, decode_budget)
            )
        self._stage_by_layer: dict[int, StageState] = {
            s.pruning_layer: s for s in self.stages
        }

        self.windows = {
            s.pruning_layer: LocalQueryWindow(self.schedule.window) for s in self.stages
        }
        self.rep_keys: dict[int, RepKeys] = {}
        self.block_table: Optional[BlockTable] = None
        self.prompt_len = 0
        self.revival_count = 0
        self._per_token_bytes = kv_entry_bytes(1, cfg.n_heads, cfg.head_dim, cfg.kv_bytes_per_elem)
        self._response = [_ResponseKv(cfg.n_heads, cfg.head_dim) for _ in range(cfg.n_layers)]
        self._pending: dict[int, tuple] = {}  # stage index -> (ticket, revive list)
        self._step = 0
        self._prefilled = False
        self._finished = False
        self._closed = False

    # -- lifecycle -------------------------------------------------------------

    def __enter__(self) -> "InferenceEngine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._closed:
            return
        try:
            self.finish()
        finally:
            self._closed = True
            self.transfers.shutdown()

    def drain(self) -> None:
        """Await every outstanding transfer ticket, emitting its records."""
        for stage_index in sorted(self._pending):
            self._await_stage(stage_index)

    def finish(self) -> None:
        """Await outstanding transfers, emit the final footprint, flush."""
        if self._finished:
            return
        self.drain()
        if self._prefilled:
            self._emit_footprint()
        self.trace.flush()
        self._finished = True

    # -- stage helpers -----------------------------------------------------------

    def stage_of_layer(self, layer: int) -> int:
        """0 for the preserve region, otherwise the 1-based stage index."""
        index = 0
        for s in self.stages:
            if layer >= s.pruning_layer:
                index = s.index
        return index

    def active_blocks(self, layer: int) -> tuple[int, ...]:
        index = self.stage_of_layer(layer)
        if index == 0:
            return self.block_table.block_ids()
        return self.stages[index - 1].active

    # -- prefill -----------------------------------------------------------------

    def prefill(self, prompt_ids) -> np.ndarray:
        """Run the staged prefill; returns the first-token logits row."""
        if self._prefilled:
            raise InvalidInputError("prefill already ran for this engine")
        ids = np.asarray(prompt_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise InvalidInputError("prompt must be a non-empty 1-D token id sequence")
        self.prompt_len = int(ids.size)
        self.block_table = partition_blocks(self.prompt_len, self.schedule.block_size)

        acts = embed_tokens(self.weights, ids)
        retained = list(self.block_table.block_ids())
        for layer in range(self.cfg.n_layers):
            rows_in = acts.hidden.shape[0]
            q, k, v = project_qkv(self.weights, layer, acts)
            # an offload ticket from the previous pruning layer must settle
            # within its FFN(p) + QKV(p+1) window, i.e. by this attention
            self.drain()
            self._store_prompt_kv(layer, retained, k, v, acts.positions)
            attn_acts = attend(self.weights, layer, acts, q, k, v)
            stage = self._stage_by_layer.get(layer)
            if stage is not None:
                attn_acts, retained = self._prefill_prune(stage, attn_acts, k, q, retained)
            acts = ffn_half(self.weights, layer, attn_acts)
            self.trace.emit(
                "layer",
                step=0,
                stage=self.stage_of_layer(layer),
                layer=layer,
                event="forward",
                rows_in=rows_in,
                rows_out=acts.hidden.shape[0],
                block=None,
                pos_start=None,
            )
        logits = final_logits(self.weights, acts)[-1]

        self.drain()
        self._emit_footprint()
        self._prefilled = True
        return logits

    def _prefill_prune(self, stage, attn_acts, keys, queries, retained):
        """Post-attention selection at a prefill pruning layer."""
        layer = stage.pruning_layer
        positions = attn_acts.positions
        keys_by_block = {
            b: keys[:, self._block_slice(positions, b), :] for b in retained
        }
        self.rep_keys[layer] = build_rep_keys(layer, keys_by_block, self.schedule.unit_size)

        window = self.windows[layer]
        n_rows = queries.shape[1]
        for t in range(max(0, n_rows - self.schedule.window), n_rows):
            window.push(queries[:, t, :])
        scores = score_blocks(window.mean(), self.rep_keys[layer], retained)
        candidate = self._select(stage, scores, retained, stage.block_budget)
        self._emit_select(stage, scores, candidate, stage.block_budget)

        stage.active = candidate
        stage.prefill_active = candidate
        dropped = [b for b in retained if b not in set(candidate)]
        self.trace.emit(
            "swap",
            step=self._step,
            stage=stage.index,
            layer=layer,
            overlap=None,
            triggered=True,
            new_active=sorted_blocks(candidate),
            load=[],
            offload=sorted_blocks(dropped),
            evict=[],
        )
        for b in dropped:
            sl = self._block_slice(positions, b)
            self.store.put_checkpoint(layer, b, attn_acts.hidden[sl])
        if dropped:
            ops = [TransferOp("offload", layer, b) for b in sorted(dropped)]
            self._pending[stage.index] = (self.transfers.submit(ops), [])

        keep = np.isin(positions, self._positions_of(candidate))
        pruned = LayerActivations(attn_acts.layer, attn_acts.hidden[keep], positions[keep])
        return pruned, list(candidate)

    # -- decode ------------------------------------------------------------------

    def decode_step(self, token_id: int) -> np.ndarray:
        """Feed one generated token through all layers; returns next logits."""
        if not self._prefilled:
            raise InvalidInputError("decode_step requires a completed prefill")
        self._step += 1
        position = self.prompt_len + self._response[0].rows
        acts = embed_tokens(
            self.weights, np.array([token_id]), np.array([position], dtype=np.int64)
        )
        for layer in range(self.cfg.n_layers):
            q, k, v = project_qkv(self.weights, layer, acts)
            # attention boundary: a ticket submitted at the previous pruning
            # layer has now overlapped FFN(p) + this layer's QKV generation
            stage_index = self.stage_of_layer(layer)
            if stage_index in self._pending:
                self._await_stage(stage_index)
            context = self._gather_context(layer)
            attn_acts = attend(self.weights, layer, acts, q, k, v, context)
            self._response[layer].append(k, v, acts.positions)
            stage = self._stage_by_layer.get(layer)
            if stage is not None:
                self._decode_rescore(stage, q)
            acts = ffn_half(self.weights, layer, attn_acts)
        return final_logits(self.weights, acts)[-1]

    def _decode_rescore(self, stage: StageState, queries: np.ndarray) -> None:
        layer = stage.pruning_layer
        window = self.windows[layer]
        window.push(queries[:, 0, :])
        eligible = self._eligibility(stage)
        scores = score_blocks(window.mean(), self.rep_keys[layer], eligible)
        candidate = self._select(stage, scores, eligible, stage.decode_budget)
        self._emit_select(stage, scores, candidate, stage.decode_budget)

        plan = plan_swap(
            candidate,
            stage.active,
            self._slow_covered(stage),
            self.policy,
            stage=stage.index,
        )
        self.trace.emit(
            "swap",
            step=self._step,
            stage=stage.index,
            layer=layer,
            overlap=plan.overlap,
            triggered=plan.triggered,
            new_active=sorted_blocks(plan.new_active),
            load=sorted_blocks(plan.load),
            offload=sorted_blocks(plan.offload),
            evict=sorted_blocks(plan.evict),
        )
        if not plan.triggered:
            return
        stage.active = tuple(sorted(plan.new_active))
        ops, revive = self._expand_plan(stage, plan)
        ticket = self.transfers.submit(ops) if ops else None
        assert stage.index not in self._pending  # one outstanding ticket per stage
        self._pending[stage.index] = (ticket, revive)

    def _expand_plan(self, stage: StageState, plan) -> tuple[list[TransferOp], list[int]]:
        """Turn block-level sets into per-(layer, block) transfer ops.

        Pairs that already have a slow copy are never moved again: offloading
        such a pair degenerates to an eviction. Pairs missing everywhere are
        queued for revival (revival mode only).
        """
        ops: list[TransferOp] = []
        for b in sorted(plan.evict):
            for layer in stage.layers:
                ops.append(TransferOp("evict", layer, b))
        for b in sorted(plan.offload):
            for layer in stage.layers:
                direction = "evict" if self.store.has_slow(layer, b) else "offload"
                ops.append(TransferOp(direction, layer, b))
        revive: list[int] = []
        for b in sorted(plan.load):
            missing = False
            for layer in stage.layers:
                if self.store.has_fast(layer, b):
                    continue
                if self.store.has_slow(layer, b):
                    ops.append(TransferOp("load", layer, b))
                else:
                    missing = True
            if missing:
                if self.mode.mode == "strict":
                    raise InvalidInputError(
                        f"strict mode selected unmaterialized block {b} at stage {stage.index}"
                    )
                revive.append(b)
        # layer-major order keeps the transfer ledger sorted by (step, layer,
        # seq); within a layer, frees land before loads
        rank = {"evict": 0, "offload": 1, "load": 2}
        ops.sort(key=lambda op: (op.layer, rank[op.direction], op.block_id))
        return ops, revive

    def _await_stage(self, stage_index: int) -> None:
        ticket, revive = self._pending.pop(stage_index)
        stage = self.stages[stage_index - 1]
        if ticket is not None:
            self.transfers.await_ticket(ticket)
            for r in ticket.records:
                self.trace.emit(
                    "transfer",
                    step=self._step,
                    stage=stage_index,
                    layer=r.layer,
                    block=r.block_id,
                    direction=r.direction,
                    bytes=r.bytes_moved,
                    enqueue_ord=r.enqueue_ord,
                    complete_ord=r.complete_ord,
                )
        if revive:
            self._revive(stage, revive)

    def _revive(self, stage: StageState, block_ids: list[int]) -> None:
        """Recompute missing deeper-layer KV from boundary checkpoints.

        The checkpointed rows are the block's post-attention state at the
        pruning layer; the deferred FFN of that layer is applied first, then
        each following stage layer produces the block's K/V while attending to
        the currently active context. Runs at most once per (stage, block).
        """
        layer = stage.pruning_layer
        block_ids = sorted(block_ids)
        rows = np.concatenate(
            [self.store.fetch_checkpoint(layer, b) for b in block_ids], axis=0
        )
        positions = self._positions_of(block_ids)
        acts = ffn_half(
            self.weights, layer, LayerActivations(layer, rows, positions)
        )
        reviving = set(block_ids)
        for next_layer in range(layer + 1, stage.layer_end):
            entries = self._gather_prompt_context(next_layer, exclude=reviving)
            context = self._entries_to_context(entries)
            attn_acts, k, v, _ = attention_half(self.weights, next_layer, acts, context)
            for b in block_ids:
                sl = self._block_slice(positions, b)
                self._put_prompt_entry(next_layer, b, k[:, sl], v[:, sl], positions[sl])
                self.trace.emit(
                    "layer",
                    step=self._step,
                    stage=stage.index,
                    layer=next_layer,
                    event="revive",
                    rows_in=int(sl.stop - sl.start),
                    rows_out=int(sl.stop - sl.start),
                    block=b,
                    pos_start=int(self.block_table.span(b).start),
                )
            acts = ffn_half(self.weights, next_layer, attn_acts)
        self.revival_count += len(block_ids)

    # -- selection / eligibility ---------------------------------------------------

    def _select(self, stage, scores, eligible, budget) -> tuple[int, ...]:
        if self.selection_hook is not None:
            picked = tuple(sorted(self.selection_hook(self._step, stage.index, scores, list(eligible), budget)))
            if 0 not in picked or not set(picked) <= set(eligible):
                raise InvalidInputError("selection hook must return eligible blocks incl. the sink")
            return picked
        return select_candidates(scores, budget)

    def _eligibility(self, stage: StageState) -> list[int]:
        all_ids = self.block_table.block_ids()
        if self.mode.mode == "strict":
            return [
                b
                for b in all_ids
                if all(self.store.has_any(l, b) for l in stage.layers)
            ]
        return [b for b in all_ids if self.store.has_any(stage.pruning_layer, b)]

    def _slow_covered(self, stage: StageState) -> set[int]:
        return {
            b
            for b in stage.active
            if all(self.store.has_slow(l, b) for l in stage.layers)
        }

    # -- KV plumbing -----------------------------------------------------------------

    def _block_slice(self, positions: np.ndarray, block_id: int) -> slice:
        span = self.block_table.span(block_id)
        lo = int(np.searchsorted(positions, span.start, side="left"))
        hi = int(np.searchsorted(positions, span.end, side="left"))
        return slice(lo, hi)

    def _positions_of(self, block_ids) -> np.ndarray:
        parts = [
            np.arange(self.block_table.span(b).start, self.block_table.span(b).end)
            for b in sorted(block_ids)
        ]
        return np.concatenate(parts).astype(np.int64)

    def _put_prompt_entry(self, layer, block_id, keys, values, positions) -> None:
        entry = KvBlockEntry(
            layer=layer,
            block_id=block_id,
            keys=np.ascontiguousarray(keys),
            values=np.ascontiguousarray(values),
            positions=np.ascontiguousarray(positions),
            byte_size=positions.size * self._per_token_bytes,
        )
        self.store.put_fast(entry)

    def _store_prompt_kv(self, layer, retained, keys, values, positions) -> None:
        for b in retained:
            sl = self._block_slice(positions, b)
            self._put_prompt_entry(layer, b, keys[:, sl], values[:, sl], positions[sl])

    def _gather_prompt_context(self, layer: int, exclude: Optional[set] = None):
        blocks = [b for b in self.active_blocks(layer) if not exclude or b not in exclude]
        entries = []
        for b in blocks:
            entry = self.store.get_fast(layer, b)
            if entry is None:
                raise InvalidInputError(
                    f"active block {b} has no fast KV at layer {layer}"
                )
            entries.append(entry)
        return entries

    def _entries_to_context(self, entries) -> Optional[KvContext]:
        if not entries:
            return None
        return KvContext(
            keys=np.concatenate([e.keys for e in entries], axis=1),
            values=np.concatenate([e.values for e in entries], axis=1),
            positions=np.concatenate([e.positions for e in entries]),
        )

    def _gather_context(self, layer: int) -> Optional[KvContext]:
        entries = self._gather_prompt_context(layer)
        response = self._response[layer]
        key_parts = [e.keys for e in entries]
        value_parts = [e.values for e in entries]
        pos_parts = [e.positions for e in entries]
        if response.rows:
            key_parts.append(response.keys)
            value_parts.append(response.values)
            pos_parts.append(response.positions)
        if not key_parts:
            return None
        return KvContext(
            keys=np.concatenate(key_parts, axis=1),
            values=np.concatenate(value_parts, axis=1),
            positions=np.concatenate(pos_parts),
        )

    # -- reporting / audits -------------------------------------------------------------

    def _emit_select(self, stage, scores, candidate, budget) -> None:
        blocks = sorted_blocks(scores)
        self.trace.emit(
            "select",
            step=self._step,
            stage=stage.index,
            layer=stage.pruning_layer,
            blocks=blocks,
            scores=[float(scores[b]) for b in blocks],
            candidate=sorted_blocks(candidate),
            budget=budget,
        )

    def _emit_footprint(self) -> None:
        self.trace.emit(
            "footprint",
            step=self._step,
            stage=None,
            layer=None,
            fast_bytes=self.store.fast_bytes_used,
            slow_bytes=self.store.slow_bytes_used,
            response_bytes=self.response_kv_bytes,
            repkey_bytes=self.rep_key_bytes,
            checkpoints=self.store.checkpoint_count(),
        )

    @property
    def prompt_kv_fast_bytes(self) -> int:
        """Modeled bytes of prompt KV currently fast-resident."""
        return self.store.fast_bytes_used

    @property
    def response_kv_bytes(self) -> int:
        return sum(r.rows for r in self._response) * self._per_token_bytes

    @property
    def rep_key_bytes(self) -> int:
        # Keys only (no values), hence half of a KV entry's per-token bytes.
        per_elem = self.cfg.kv_bytes_per_elem
        return sum(r.byte_size(per_elem) for r in self.rep_keys.values())

    def fast_tier_mismatches(self) -> list[tuple[int, set[int], set[int]]]:
        """Per-layer diff of fast-tier contents vs the declared active sets.

        Returns (layer, missing, unexpected) triples; empty means consistent.
        Call after `finish()`.
        """
        diffs = []
        for layer in range(self.cfg.n_layers):
            expected = set(self.active_blocks(layer))
            actual = self.store.fast_blocks(layer)
            if expected != actual:
                diffs.append((layer, expected - actual, actual - expected))
        return diffs


def run_generation(
    engine: InferenceEngine,
    prompt_ids,
    steps: int,
    forced_tokens: Optional[Sequence[int]] = None,
) -> tuple[list[int], list[np.ndarray]]:
    """Prefill then `steps` decode iterations (greedy unless tokens forced).

    Returns (generated token ids, logits rows); the logits list starts with
    the prefill row, then one row per decode step.
    """
    logits = engine.prefill(prompt_ids)
    all_logits = [logits]
    tokens: list[int] = []
    for i in range(steps):
        if forced_tokens is not None:
            token = int(forced_tokens[i])
        else:
            token = int(np.argmax(logits))
        tokens.append(token)
        logits = engine.decode_step(token)
        all_logits.append(logits)
    return tokens, all_logits

"""Block partitioning, unit-mean key summaries, and importance scoring.

Prompt positions are split into fixed-size blocks. Each block is further split
into contiguous token units; the per-head arithmetic mean of a unit's key rows
is its representative key. A block's score against the recent-query probe is
the max over units of the head-averaged dot product; top-k selection always
keeps the sink (initial) block and breaks ties toward the lower block id.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class BlockSpan:
    block_id: int
    start: int
    end: int  # exclusive

    @property
    def tokens(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class BlockTable:
    """Ordered, disjoint, covering partition of [0, prompt_len)."""

    block_size: int
    prompt_len: int
    spans: tuple[BlockSpan, ...]

    def __len__(self) -> int:
        return len(self.spans)

    def span(self, block_id: int) -> BlockSpan:
        return self.spans[block_id]

    def block_ids(self) -> tuple[int, ...]:
        return tuple(s.block_id for s in self.spans)


def partition_blocks(prompt_len: int, block_size: int) -> BlockTable:
    """Contiguous partition; the last block may be partial."""
    if prompt_len < 1:
        raise InvalidInputError("prompt_len must be >= 1")
    if block_size < 1:
        raise InvalidInputError("block_size must be >= 1")
    spans = []
    for i, start in enumerate(range(0, prompt_len, block_size)):
        spans.append(BlockSpan(i, start, min(start + block_size, prompt_len)))
    return BlockTable(block_size, prompt_len, tuple(spans))


@dataclass
class RepKeys:
    """Per-block unit-mean key vectors at one layer.

    `means[block_id]` is [M, H, d] where M = ceil(block tokens / unit_size);
    a partial trailing unit averages its actual members only.
    """

    layer: int
    unit_size: int
    means: dict[int, np.ndarray] = field(default_factory=dict)

    def byte_size(self, bytes_per_elem: int) -> int:
        return sum(m.size * bytes_per_elem for m in self.means.values())


def build_rep_keys(
    layer: int, keys_by_block: Mapping[int, np.ndarray], unit_size: int
) -> RepKeys:
    """Average each unit's key rows per head. keys_by_block maps id -> [H, T, d]."""
    if unit_size < 1:
        raise InvalidInputError("unit_size must be >= 1")
    reps = RepKeys(layer, unit_size)
    for block_id in sorted(keys_by_block):
        keys = keys_by_block[block_id]
        if keys is None or keys.ndim != 3 or keys.shape[1] == 0:
            raise InvalidInputError(f"block {block_id}: missing key rows")
        if not np.isfinite(keys).all():
            raise InvalidInputError(f"block {block_id}: non-finite key rows")
        n_tokens = keys.shape[1]
        n_units = math.ceil(n_tokens / unit_size)
        means = np.empty((n_units, keys.shape[0], keys.shape[2]), dtype=np.float32)
        for m in range(n_units):
            chunk = keys[:, m * unit_size : min((m + 1) * unit_size, n_tokens), :]
            means[m] = chunk.mean(axis=1)
        reps.means[block_id] = means
    return reps


class LocalQueryWindow:
    """Ring of the most recent per-head query vectors; probe = their mean."""

    def __init__(self, window: int):
        if window < 1:
            raise ConfigError("query window must be >= 1")
        self.window = window
        self._ring: deque[np.ndarray] = deque(maxlen=window)

    def push(self, query: np.ndarray) -> None:
        query = np.asarray(query, dtype=np.float32)
        if query.ndim != 2:
            raise InvalidInputError("query window expects one [H, d] vector per push")
        self._ring.append(query)

    def seed(self, queries: Iterable[np.ndarray]) -> None:
        for q in queries:
            self.push(q)

    def __len__(self) -> int:
        return len(self._ring)

    def mean(self) -> np.ndarray:
        if not self._ring:
            raise InvalidInputError("query window is empty")
        return np.mean(np.stack(self._ring), axis=0, dtype=np.float32)


def score_blocks(
    query_probe: np.ndarray, reps: RepKeys, eligible: Iterable[int]
) -> dict[int, float]:
    """Block score = max over units of the head-averaged probe/key dot product.

    No 1/sqrt(d) scaling and no softmax: top-k selection is invariant to
    positive scaling of the probe.
    """
    probe = np.asarray(query_probe, dtype=np.float32)
    if probe.ndim != 2 or not np.isfinite(probe).all():
        raise InvalidInputError("query probe must be a finite [H, d] array")
    scores: dict[int, float] = {}
    for block_id in sorted(eligible):
        means = reps.means.get(block_id)
        if means is None:
            raise InvalidInputError(f"block {block_id}: eligible but has no rep keys")
        # means: [M, H, d]; per-unit head-mean dot with the [H, d] probe.
        per_unit = np.einsum("mhd,hd->m", means, probe) / np.float32(probe.shape[0])
        scores[block_id] = float(per_unit.max())
    return scores


def select_candidates(
    scores: Mapping[int, float], block_budget: int, sink: int = 0
) -> tuple[int, ...]:
    """Sink plus the top-(budget - 1) other blocks, ascending block id.

    Ties break toward the lower block id. If fewer non-sink blocks are
    eligible than the budget allows, all of them are taken.
    """
    if block_budget < 1:
        raise InvalidInputError("block budget must be >= 1")
    if sink not in scores:
        raise InvalidInputError(f"sink block {sink} is not eligible")
    others = sorted((b for b in scores if b != sink), key=lambda b: (-scores[b], b))
    chosen = [sink] + others[: block_budget - 1]
    return tuple(sorted(chosen))


@dataclass(frozen=True)
class PruneSchedule:
    """Pruning layers with per-stage retained-token budgets and knobs.

    Stage s opens at pruning_layers[s] and its block budget is
    ceil(token_budgets[s] / block_size). An empty schedule disables pruning.
    """

    pruning_layers: tuple[int, ...] = ()
    token_budgets: tuple[int, ...] = ()
    block_size: int = 64
    unit_size: int = 8
    window: int = 4

    @classmethod
    def disabled(cls, block_size: int = 64, unit_size: int = 8, window: int = 4):
        return cls((), (), block_size, unit_size, window)

    @property
    def n_stages(self) -> int:
        return len(self.pruning_layers)

    def validate(self, n_layers: Optional[int] = None) -> None:
        if len(self.pruning_layers) != len(self.token_budgets):
            raise ConfigError("pruning_layers and token_budgets lengths differ")
        if self.block_size < 1 or self.unit_size < 1 or self.window < 1:
            raise ConfigError("block_size, unit_size and window must be >= 1")
        layers = self.pruning_layers
        if any(b < a or b == a for a, b in zip(layers, layers[1:])):
            raise ConfigError("pruning layers must be strictly increasing")
        if any(l < 0 for l in layers):
            raise ConfigError("pruning layers must be >= 0")
        if n_layers is not None and layers and layers[-1] >= n_layers:
            raise ConfigError(
                f"pruning layer {layers[-1]} out of range for {n_layers} layers"
            )
        budgets = self.token_budgets
        if any(b < 1 for b in budgets):
            raise ConfigError("token budgets must be >= 1")
        if any(b2 >= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ConfigError("token budgets must be strictly decreasing")

    def block_budget(self, stage: int) -> int:
        return max(1, math.ceil(self.token_budgets[stage] / self.block_size))


def parse_schedule(text: str) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Parse "layer:budget,layer:budget,..." (empty string = no pruning)."""
    text = text.strip()
    if not text:
        return (), ()
    layers, budgets = [], []
    for part in text.split(","):
        try:
            layer_s, budget_s = part.split(":")
            layers.append(int(layer_s))
            budgets.append(int(budget_s))
        except ValueError as exc:
            raise ConfigError(f"schedule: cannot parse entry {part!r}") from exc
    return tuple(layers), tuple(budgets)

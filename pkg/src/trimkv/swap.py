"""Pure swap decision logic: overlap ratio, trigger threshold, transfer sets.

A swap is triggered only when the candidate set's overlap with the previous
active set falls strictly below gamma. Deactivated blocks whose KV already has
a slow-tier copy need no data movement and are only evicted.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import AbstractSet, Iterable

from .errors import ConfigError, InvalidInputError


@dataclass(frozen=True)
class SwapPolicy:
    gamma: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must lie in [0, 1]")


@dataclass(frozen=True)
class SwapPlan:
    """Outcome of one swap decision.

    Untriggered plans carry empty sets and keep the previous active set.
    `evict` holds deactivated blocks already slow-resident (freed in place);
    `offload` holds deactivated blocks that still need a copy-out.
    """

    stage: int
    triggered: bool
    overlap: float
    new_active: frozenset[int]
    load: frozenset[int]
    offload: frozenset[int]
    evict: frozenset[int]


def overlap_ratio(candidate: AbstractSet[int], prev_active: AbstractSet[int]) -> float:
    """|candidate intersect prev_active| / |candidate|."""
    if not candidate:
        raise InvalidInputError("candidate set must be non-empty")
    return len(candidate & prev_active) / len(candidate)


def plan_swap(
    candidate: Iterable[int],
    prev_active: Iterable[int],
    slow_resident: Iterable[int],
    policy: SwapPolicy,
    stage: int = 0,
    sink: int = 0,
) -> SwapPlan:
    """Apply the overlap test and compute the load/offload/evict sets.

    `slow_resident` names blocks whose KV for this stage already has a full
    slow-tier copy. The trigger comparison is strict: overlap == gamma does
    not swap.
    """
    cand = frozenset(candidate)
    prev = frozenset(prev_active)
    mem = frozenset(slow_resident)
    if sink not in cand:
        raise InvalidInputError(f"sink block {sink} missing from candidate set")
    ratio = overlap_ratio(cand, prev)
    if ratio < policy.gamma:
        leaving = prev - cand
        return SwapPlan(
            stage=stage,
            triggered=True,
            overlap=ratio,
            new_active=cand,
            load=cand - prev,
            offload=leaving - mem,
            evict=leaving & mem,
        )
    return SwapPlan(
        stage=stage,
        triggered=False,
        overlap=ratio,
        new_active=prev,
        load=frozenset(),
        offload=frozenset(),
        evict=frozenset(),
    )

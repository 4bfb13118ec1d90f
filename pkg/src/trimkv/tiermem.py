"""Two-tier KV residency manager with an asynchronous transfer agent.

The fast tier models device memory (byte-tracked, optionally capped); the slow
tier models host memory (unbounded, optional injected per-byte latency).
Exactly two agents touch the store: the compute agent (engine) and one
transfer worker thread. Loads copy slow->fast, leaving the slow copy in place;
offloads move fast->slow; evictions free fast bytes for entries that already
have a slow copy, with no data movement.
"""

from __future__ import annotations

import threading
import time
import zlib
from dataclasses import dataclass, field
from queue import Queue
from typing import Callable, Optional

import numpy as np

from .errors import CapacityError, CheckpointMissingError, InvalidInputError, TransferError


def kv_entry_bytes(tokens: int, kv_heads: int, head_dim: int, kv_bytes_per_elem: int) -> int:
    """Modeled cache footprint of one (layer, block) entry: K and V rows."""
    return tokens * kv_heads * head_dim * 2 * kv_bytes_per_elem


@dataclass
class KvBlockEntry:
    """Immutable keys/values of one prompt block at one layer."""

    layer: int
    block_id: int
    keys: np.ndarray  # [H, T, d]
    values: np.ndarray
    positions: np.ndarray
    byte_size: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.layer, self.block_id)

    def checksum(self) -> int:
        crc = zlib.crc32(np.ascontiguousarray(self.keys).tobytes())
        crc = zlib.crc32(np.ascontiguousarray(self.values).tobytes(), crc)
        return zlib.crc32(np.ascontiguousarray(self.positions).tobytes(), crc)

    def same_content(self, other: "KvBlockEntry") -> bool:
        return (
            self.key == other.key
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.positions, other.positions)
        )


class TierStore:
    """Byte-accounted fast/slow residency maps plus boundary checkpoints.

    All map mutations happen under one lock; entries are installed whole, so a
    reader never observes a torn entry. The set of (layer, block) pairs with a
    slow copy is the memory-resident set: once a pair is there, deactivating
    it never moves bytes again.
    """

    def __init__(self, fast_bytes_cap: Optional[int] = None):
        self._lock = threading.RLock()
        self._fast: dict[tuple[int, int], KvBlockEntry] = {}
        self._slow: dict[tuple[int, int], KvBlockEntry] = {}
        self._checkpoints: dict[tuple[int, int], np.ndarray] = {}
        self.fast_bytes_cap = fast_bytes_cap
        self.fast_bytes_used = 0
        self.slow_bytes_used = 0
        self.loaded_bytes_total = 0
        self.offloaded_bytes_total = 0

    # -- residency queries ---------------------------------------------------

    def has_fast(self, layer: int, block_id: int) -> bool:
        with self._lock:
            return (layer, block_id) in self._fast

    def has_slow(self, layer: int, block_id: int) -> bool:
        with self._lock:
            return (layer, block_id) in self._slow

    def has_any(self, layer: int, block_id: int) -> bool:
        with self._lock:
            key = (layer, block_id)
            return key in self._fast or key in self._slow

    def get_fast(self, layer: int, block_id: int) -> Optional[KvBlockEntry]:
        with self._lock:
            return self._fast.get((layer, block_id))

    def get_slow(self, layer: int, block_id: int) -> Optional[KvBlockEntry]:
        with self._lock:
            return self._slow.get((layer, block_id))

    def residency(self, layer: int, block_id: int) -> str:
        with self._lock:
            key = (layer, block_id)
            fast, slow = key in self._fast, key in self._slow
        if fast and slow:
            return "both"
        if fast:
            return "fast"
        if slow:
            return "slow"
        return "unmaterialized"

    def fast_blocks(self, layer: int) -> set[int]:
        with self._lock:
            return {b for (l, b) in self._fast if l == layer}

    def slow_keys(self) -> set[tuple[int, int]]:
        """The memory-resident set: every (layer, block) with a slow copy."""
        with self._lock:
            return set(self._slow)

    def fast_entries(self) -> list[KvBlockEntry]:
        with self._lock:
            return list(self._fast.values())

    def slow_entries(self) -> list[KvBlockEntry]:
        with self._lock:
            return list(self._slow.values())

    # -- direct puts (compute agent) ------------------------------------------

    def put_fast(self, entry: KvBlockEntry) -> None:
        with self._lock:
            existing = self._fast.get(entry.key)
            if existing is not None:
                if existing.same_content(entry):
                    return  # idempotent
                raise InvalidInputError(
                    f"conflicting fast entry for layer {entry.layer} block {entry.block_id}"
                )
            if (
                self.fast_bytes_cap is not None
                and self.fast_bytes_used + entry.byte_size > self.fast_bytes_cap
            ):
                raise CapacityError(
                    f"fast tier capacity exceeded at layer {entry.layer} "
                    f"({self.fast_bytes_used + entry.byte_size} > {self.fast_bytes_cap})"
                )
            self._fast[entry.key] = entry
            self.fast_bytes_used += entry.byte_size

    def put_slow(self, entry: KvBlockEntry) -> None:
        with self._lock:
            existing = self._slow.get(entry.key)
            if existing is not None:
                if existing.same_content(entry):
                    return
                raise InvalidInputError(
                    f"conflicting slow entry for layer {entry.layer} block {entry.block_id}"
                )
            self._slow[entry.key] = entry
            self.slow_bytes_used += entry.byte_size

    # -- transfer-agent primitives (called by TransferEngine) -----------------

    def _drop_fast(self, layer: int, block_id: int) -> KvBlockEntry:
        with self._lock:
            entry = self._fast.pop((layer, block_id))
            self.fast_bytes_used -= entry.byte_size
            return entry

    def _install_fast(self, entry: KvBlockEntry) -> None:
        with self._lock:
            if entry.key in self._fast:
                return
            if (
                self.fast_bytes_cap is not None
                and self.fast_bytes_used + entry.byte_size > self.fast_bytes_cap
            ):
                raise CapacityError(
                    f"fast tier capacity exceeded at layer {entry.layer}"
                )
            self._fast[entry.key] = entry
            self.fast_bytes_used += entry.byte_size

    # -- boundary checkpoints --------------------------------------------------

    def put_checkpoint(self, pruning_layer: int, block_id: int, rows: np.ndarray) -> None:
        key = (pruning_layer, block_id)
        with self._lock:
            if key in self._checkpoints:
                return  # stored once per (layer, block); immutable afterwards
            self._checkpoints[key] = np.array(rows, dtype=np.float32, copy=True)

    def fetch_checkpoint(self, pruning_layer: int, block_id: int) -> np.ndarray:
        with self._lock:
            rows = self._checkpoints.get((pruning_layer, block_id))
        if rows is None:
            raise CheckpointMissingError(
                f"no boundary checkpoint for layer {pruning_layer} block {block_id}"
            )
        return rows

    def checkpoint_count(self, pruning_layer: Optional[int] = None) -> int:
        with self._lock:
            if pruning_layer is None:
                return len(self._checkpoints)
            return sum(1 for (l, _) in self._checkpoints if l == pruning_layer)


@dataclass(frozen=True)
class TransferOp:
    direction: str  # "load" | "offload" | "evict"
    layer: int
    block_id: int


@dataclass
class TransferRecord:
    direction: str
    layer: int
    block_id: int
    bytes_moved: int
    enqueue_ord: int
    complete_ord: int


@dataclass
class TransferTicket:
    ticket_id: int
    ops: tuple[TransferOp, ...]
    records: list[TransferRecord] = field(default_factory=list)
    done: threading.Event = field(default_factory=threading.Event)
    error: Optional[BaseException] = None


class TransferEngine:
    """Single worker thread applying tickets in FIFO order.

    Ordinals come from logical counters (one at enqueue, one at completion),
    so the resulting ledger is deterministic for a deterministic submit
    sequence. `byte_latency_s` injects a per-byte delay for timeline realism;
    `fault_hook(op)` may raise to exercise the failure path in tests.
    """

    def __init__(
        self,
        store: TierStore,
        byte_latency_s: float = 0.0,
        fault_hook: Optional[Callable[[TransferOp], None]] = None,
    ):
        self.store = store
        self.byte_latency_s = byte_latency_s
        self.fault_hook = fault_hook
        self._queue: Queue[Optional[TransferTicket]] = Queue()
        self._enqueue_ord = 0
        self._complete_ord = 0
        self._next_ticket = 0
        self._lock = threading.Lock()
        self._worker = threading.Thread(target=self._run, name="kv-transfer", daemon=True)
        self._worker.start()
        self._closed = False

    def submit(self, ops: list[TransferOp]) -> TransferTicket:
        """Validate the whole plan, then enqueue it; returns immediately."""
        if self._closed:
            raise TransferError("transfer engine is shut down")
        with self._lock:
            for op in ops:
                layer, block = op.layer, op.block_id
                if op.direction == "load":
                    if not self.store.has_slow(layer, block):
                        raise InvalidInputError(
                            f"load of layer {layer} block {block}: no slow copy"
                        )
                elif op.direction == "offload":
                    if not self.store.has_fast(layer, block):
                        raise InvalidInputError(
                            f"offload of layer {layer} block {block}: not fast-resident"
                        )
                elif op.direction == "evict":
                    if not self.store.has_fast(layer, block):
                        raise InvalidInputError(
                            f"evict of layer {layer} block {block}: not fast-resident"
                        )
                    if not self.store.has_slow(layer, block):
                        raise InvalidInputError(
                            f"evict of layer {layer} block {block}: no slow copy to keep"
                        )
                else:
                    raise InvalidInputError(f"unknown transfer direction {op.direction!r}")
            ticket = TransferTicket(self._next_ticket, tuple(ops))
            self._next_ticket += 1
            base = self._enqueue_ord
            self._enqueue_ord += len(ops)
        ticket._enqueue_base = base  # type: ignore[attr-defined]
        self._queue.put(ticket)
        return ticket

    def await_ticket(self, ticket: TransferTicket) -> None:
        """Block until every movement of the ticket is visible; re-raises failures."""
        ticket.done.wait()
        if ticket.error is not None:
            raise TransferError(f"transfer ticket {ticket.ticket_id} failed") from ticket.error

    def shutdown(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._queue.put(None)
        self._worker.join(timeout=30.0)

    # -- worker side -----------------------------------------------------------

    def _run(self) -> None:
        while True:
            ticket = self._queue.get()
            if ticket is None:
                return
            try:
                for i, op in enumerate(ticket.ops):
                    if self.fault_hook is not None:
                        self.fault_hook(op)
                    moved = self._apply(op)
                    self._complete_ord += 1
                    ticket.records.append(
                        TransferRecord(
                            op.direction,
                            op.layer,
                            op.block_id,
                            moved,
                            ticket._enqueue_base + i,  # type: ignore[attr-defined]
                            self._complete_ord,
                        )
                    )
            except BaseException as exc:  # surfaced at await_ticket
                ticket.error = exc
            finally:
                ticket.done.set()

    def _apply(self, op: TransferOp) -> int:
        store = self.store
        if op.direction == "evict":
            store._drop_fast(op.layer, op.block_id)
            return 0
        if op.direction == "offload":
            entry = store.get_fast(op.layer, op.block_id)
            self._simulate_latency(entry.byte_size)
            store.put_slow(entry)
            store._drop_fast(op.layer, op.block_id)
            store.offloaded_bytes_total += entry.byte_size
            return entry.byte_size
        # load: copy, slow copy retained
        entry = store.get_slow(op.layer, op.block_id)
        self._simulate_latency(entry.byte_size)
        store._install_fast(entry)
        store.loaded_bytes_total += entry.byte_size
        return entry.byte_size

    def _simulate_latency(self, nbytes: int) -> None:
        if self.byte_latency_s > 0.0:
            time.sleep(self.byte_latency_s * nbytes)

"""Append-only structured event log.

One JSON object per line, UTF-8, with a fixed field order per kind so that two
runs with identical inputs produce byte-identical files. Records carry logical
ordinals only (never wall-clock times). The documented schema lives in the
README; `validate_record` enforces it.
"""

from __future__ import annotations

import json
from typing import Iterable, Optional

from .errors import InvalidInputError

# kind -> required payload fields (beyond kind/seq/step/stage/layer).
SCHEMA: dict[str, tuple[str, ...]] = {
    "select": ("blocks", "scores", "candidate", "budget"),
    "swap": ("overlap", "triggered", "new_active", "load", "offload", "evict"),
    "transfer": ("block", "direction", "bytes", "enqueue_ord", "complete_ord"),
    "layer": ("event", "rows_in", "rows_out", "block", "pos_start"),
    "footprint": (
        "fast_bytes",
        "slow_bytes",
        "response_bytes",
        "repkey_bytes",
        "checkpoints",
    ),
    "probe": ("prune_token", "prune_layer", "max_abs", "cosine"),
}

_HEAD_FIELDS = ("kind", "seq", "step", "stage", "layer")


def validate_record(rec: dict) -> None:
    kind = rec.get("kind")
    if kind not in SCHEMA:
        raise InvalidInputError(f"unknown trace record kind {kind!r}")
    for name in _HEAD_FIELDS:
        if name not in rec:
            raise InvalidInputError(f"trace record missing field {name!r}")
    for name in SCHEMA[kind]:
        if name not in rec:
            raise InvalidInputError(f"{kind} record missing field {name!r}")


def record_to_line(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), ensure_ascii=True)


class TraceWriter:
    """Single-writer event collector; `flush` appends lines to the sink path.

    The transfer agent never writes here: the compute agent emits transfer
    records after awaiting a ticket, which keeps the file ordering (and its
    bytes) deterministic.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: list[dict] = []
        self._seq = 0
        self._flushed = 0

    def emit(
        self,
        kind: str,
        step: int,
        stage: Optional[int] = None,
        layer: Optional[int] = None,
        **payload,
    ) -> dict:
        rec: dict = {
            "kind": kind,
            "seq": self._seq,
            "step": step,
            "stage": stage,
            "layer": layer,
        }
        for name in SCHEMA.get(kind, ()):
            rec[name] = payload.get(name)
        validate_record(rec)
        self._seq += 1
        self.records.append(rec)
        return rec

    def flush(self) -> None:
        """Write any unflushed records; on I/O failure memory stays intact."""
        if self.path is None:
            return
        pending = self.records[self._flushed :]
        if not pending:
            return
        with open(self.path, "a", encoding="utf-8") as f:
            for rec in pending:
                f.write(record_to_line(rec) + "\n")
        self._flushed = len(self.records)

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]


def read_trace(path: str) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            validate_record(rec)
            records.append(rec)
    return records


def sorted_blocks(blocks: Iterable[int]) -> list[int]:
    """Canonical ascending serialization for block sets."""
    return sorted(int(b) for b in blocks)

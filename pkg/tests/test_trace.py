import json

import numpy as np
import pytest

from helpers import replay_swap_records
from trimkv.blockindex import PruneSchedule
from trimkv.engine import InferenceEngine, run_generation
from trimkv.errors import InvalidInputError
from trimkv.model import ModelConfig
from trimkv.swap import SwapPolicy
from trimkv.trace import TraceWriter, read_trace, record_to_line, validate_record


def small_engine(trace, gamma=0.8):
    cfg = ModelConfig(4, 2, 8, 32, 64, seed=21)
    schedule = PruneSchedule((1, 2), (256, 128), block_size=64)
    return InferenceEngine(cfg, schedule, SwapPolicy(gamma), trace=trace)


class TestWriter:
    def test_select_round_trip(self, tmp_path):
        path = tmp_path / "t.jsonl"
        writer = TraceWriter(str(path))
        rec = writer.emit(
            "select",
            step=3,
            stage=1,
            layer=2,
            blocks=[0, 1, 2],
            scores=[0.5, -1.25, 3.0],
            candidate=[0, 2],
            budget=2,
        )
        writer.flush()
        loaded = read_trace(str(path))
        assert loaded == [rec]

    def test_schema_rejects_unknown_kind(self):
        with pytest.raises(InvalidInputError):
            validate_record({"kind": "mystery", "seq": 0, "step": 0, "stage": None, "layer": None})

    def test_schema_rejects_missing_field(self):
        writer = TraceWriter()
        rec = writer.emit(
            "swap",
            step=1,
            stage=1,
            layer=1,
            overlap=0.5,
            triggered=True,
            new_active=[0],
            load=[],
            offload=[],
            evict=[],
        )
        del rec["overlap"]
        with pytest.raises(InvalidInputError):
            validate_record(rec)

    def test_lines_are_compact_json(self):
        writer = TraceWriter()
        rec = writer.emit(
            "footprint",
            step=0,
            fast_bytes=1,
            slow_bytes=2,
            response_bytes=3,
            repkey_bytes=4,
            checkpoints=5,
        )
        line = record_to_line(rec)
        assert " " not in line
        assert json.loads(line) == rec

    def test_flush_is_incremental(self, tmp_path):
        path = tmp_path / "t.jsonl"
        writer = TraceWriter(str(path))
        writer.emit(
            "footprint",
            step=0,
            fast_bytes=0,
            slow_bytes=0,
            response_bytes=0,
            repkey_bytes=0,
            checkpoints=0,
        )
        writer.flush()
        writer.flush()  # no duplicate lines
        assert len(read_trace(str(path))) == 1

    def test_flush_failure_keeps_memory_intact(self, tmp_path):
        writer = TraceWriter(str(tmp_path / "no-such-dir" / "t.jsonl"))
        rec = writer.emit(
            "footprint",
            step=0,
            fast_bytes=0,
            slow_bytes=0,
            response_bytes=0,
            repkey_bytes=0,
            checkpoints=0,
        )
        with pytest.raises(OSError):
            writer.flush()
        assert writer.records == [rec]
        writer.path = str(tmp_path / "t.jsonl")
        writer.flush()
        assert read_trace(writer.path) == [rec]

    def test_seq_ordering(self):
        writer = TraceWriter()
        for step in range(3):
            writer.emit(
                "footprint",
                step=step,
                fast_bytes=0,
                slow_bytes=0,
                response_bytes=0,
                repkey_bytes=0,
                checkpoints=0,
            )
        seqs = [r["seq"] for r in writer.records]
        assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)


class TestRunLedgers:
    def test_full_run_ledger_reconciliation(self, rng):
        writer = TraceWriter()
        with small_engine(writer) as engine:
            run_generation(engine, rng.integers(0, 64, size=384), 10)
            engine.finish()
            trace_total = sum(r["bytes"] for r in writer.of_kind("transfer"))
            store_total = (
                engine.store.loaded_bytes_total + engine.store.offloaded_bytes_total
            )
            assert trace_total == store_total

    def test_every_transfer_preceded_by_naming_swap(self, rng):
        writer = TraceWriter()
        with small_engine(writer, gamma=1.0) as engine:
            run_generation(engine, rng.integers(0, 64, size=384), 8)
            engine.finish()
        seen_swaps = []
        for rec in writer.records:
            if rec["kind"] == "swap":
                seen_swaps.append(rec)
            elif rec["kind"] == "transfer":
                naming = [
                    s
                    for s in seen_swaps
                    if s["stage"] == rec["stage"]
                    and rec["block"] in (s["load"] + s["offload"] + s["evict"])
                ]
                assert naming, f"transfer of block {rec['block']} never named by a swap"

    def test_replay_soundness(self, rng):
        writer = TraceWriter()
        with small_engine(writer, gamma=0.9) as engine:
            run_generation(engine, rng.integers(0, 64, size=384), 12)
            engine.finish()
            stages = {s.index: list(s.layers) for s in engine.stages}
        assert replay_swap_records(writer.records, stages, gamma=0.9) == []

    def test_records_sorted_by_step_layer_seq(self, rng):
        writer = TraceWriter()
        with small_engine(writer, gamma=1.0) as engine:
            run_generation(engine, rng.integers(0, 64, size=384), 9)
            engine.finish()
        # footprints carry no layer; they close out their step
        keys = [
            (r["step"], r["layer"] if r["layer"] is not None else 10**9, r["seq"])
            for r in writer.records
        ]
        assert keys == sorted(keys)

    def test_two_runs_identical_records(self, rng):
        prompt = rng.integers(0, 64, size=384)

        def run():
            writer = TraceWriter()
            with small_engine(writer) as engine:
                run_generation(engine, prompt, 6)
                engine.finish()
            return [record_to_line(r) for r in writer.records]

        assert run() == run()

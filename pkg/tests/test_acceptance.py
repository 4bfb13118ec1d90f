"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion lines.
Criterion 8 is reporting-only (wall-clock comparison is machine-dependent and
non-gating by design).
"""

import math
import time

import numpy as np
import pytest

from conftest import tiny_config
from helpers import (
    brute_block_score,
    brute_rep_keys,
    brute_select,
    replay_swap_records,
)
from trimkv.blockindex import PruneSchedule, build_rep_keys, score_blocks, select_candidates
from trimkv.cli import main as cli_main
from trimkv.costmodel import MemSpec, TimelineParams, prompt_kv_bytes, simulate_timeline
from trimkv.engine import EngineMode, InferenceEngine, run_generation
from trimkv.model import ModelConfig, init_weights
from trimkv.reference import dense_logits
from trimkv.swap import SwapPolicy, plan_swap
from trimkv.tiermem import KvBlockEntry, TierStore, TransferEngine, TransferOp, kv_entry_bytes


def test_criterion_1_memory_table(capsys):
    start = time.perf_counter()
    assert cli_main(["memtable"]) == 0
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    rows = {}
    for line in out.splitlines():
        label, *cells = line.split("  ")
        rows[line[:14].strip()] = [float(x) for x in line[14:].split()]
    full = rows["full kv (GiB)"]
    pruned = rows["pruned  (GiB)"]
    saving = rows["saving    (%)"]
    for got, want in zip(full, [1.00, 2.00, 3.00, 3.50, 4.00]):
        assert abs(got - want) <= 0.01
    for got, want in zip(pruned, [0.80, 1.11, 1.42, 1.58, 1.73]):
        assert abs(got - want) <= 0.01
    for got, want in zip(saving, [20.3, 44.5, 52.6, 54.9, 56.6]):
        assert abs(got - want) <= 0.1
    assert elapsed < 1.0
    print(
        f"\nCRITERION 1 PASS - memory table reproduces all 10 GiB cells and 5 "
        f"savings within tolerance in {elapsed:.3f}s"
    )


def test_criterion_2_dense_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(2025)
    worst = 0.0
    for case in range(20):
        n_layers = int(rng.integers(1, 5))
        n_heads = int(rng.integers(1, 9))
        head_dim = int(rng.choice([2, 4, 8]))
        cfg = ModelConfig(
            n_layers=n_layers,
            n_heads=n_heads,
            head_dim=head_dim,
            ffn_dim=int(rng.integers(8, 65)),
            vocab_size=int(rng.integers(32, 129)),
            seed=case,
        )
        ws = init_weights(cfg)
        prompt = rng.integers(0, cfg.vocab_size, size=int(rng.integers(8, 513)))
        forced = rng.integers(0, cfg.vocab_size, size=8).tolist()
        with InferenceEngine(cfg, PruneSchedule.disabled(), weights=ws) as engine:
            _, logits = run_generation(engine, prompt, 8, forced)
        seq = list(prompt)
        diffs = [float(np.max(np.abs(logits[0] - dense_logits(ws, seq)[-1])))]
        for token, got in zip(forced, logits[1:]):
            seq.append(token)
            diffs.append(float(np.max(np.abs(got - dense_logits(ws, seq)[-1]))))
        worst = max(worst, *diffs)
        assert worst <= 1e-5, f"case {case}: max-abs {worst}"
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    print(
        f"\nCRITERION 2 PASS - 20 random configs, prefill + 8 decode steps, "
        f"max logit deviation {worst:.2e} <= 1e-5 in {elapsed:.1f}s"
    )


def test_criterion_3_scoring_selection_oracles():
    rng = np.random.default_rng(3)
    worst_rep = worst_score = 0.0
    for instance in range(1000):
        n_blocks = int(rng.integers(1, 65))
        n_heads = int(rng.integers(1, 9))
        head_dim = int(rng.choice([2, 4]))
        unit_size = int(rng.integers(1, 5))
        max_units = int(rng.integers(1, 9))
        keys = {}
        for b in range(n_blocks):
            tokens = int(rng.integers(1, unit_size * max_units + 1))
            keys[b] = rng.standard_normal((n_heads, tokens, head_dim)).astype(np.float32)
        reps = build_rep_keys(0, keys, unit_size)
        probe = rng.standard_normal((n_heads, head_dim)).astype(np.float32)
        scores = score_blocks(probe, reps, range(n_blocks))
        check_blocks = rng.choice(n_blocks, size=min(n_blocks, 4), replace=False)
        for b in check_blocks:
            b = int(b)
            oracle_reps = brute_rep_keys(keys[b], unit_size)
            assert reps.means[b].shape == oracle_reps.shape
            rep_err = float(np.max(np.abs(reps.means[b] - oracle_reps)))
            score_err = abs(scores[b] - brute_block_score(probe, oracle_reps))
            worst_rep = max(worst_rep, rep_err)
            worst_score = max(worst_score, score_err)
            assert rep_err <= 1e-6 and score_err <= 1e-6
        if instance % 3 == 0:  # force ties so the tie rule is exercised
            scores = {b: round(s, 1) for b, s in scores.items()}
        budget = int(rng.integers(1, n_blocks + 1))
        assert select_candidates(scores, budget) == brute_select(scores, budget)
    print(
        f"\nCRITERION 3 PASS - 1000 instances: rep keys <= {worst_rep:.2e}, "
        f"scores <= {worst_score:.2e} (tol 1e-6), selection exact"
    )


def _random_plan_tuple(rng):
    universe = 16
    candidate = {0} | set(rng.choice(universe, size=int(rng.integers(0, 9)), replace=False).tolist())
    prev = set(rng.choice(universe, size=int(rng.integers(0, 9)), replace=False).tolist())
    mem = set(rng.choice(universe, size=int(rng.integers(0, 9)), replace=False).tolist())
    gamma = float(rng.uniform(0, 1))
    return candidate, prev, mem, gamma


def test_criterion_4_swap_properties():
    rng = np.random.default_rng(4)
    for _ in range(10_000):
        candidate, prev, mem, gamma = _random_plan_tuple(rng)
        plan = plan_swap(candidate, prev, mem, SwapPolicy(gamma))
        cand_f, prev_f, mem_f = frozenset(candidate), frozenset(prev), frozenset(mem)
        if plan.triggered:
            assert plan.overlap < gamma
            assert plan.new_active == cand_f
            assert plan.load == cand_f - prev_f
            assert not plan.load & prev_f
            assert not plan.offload & mem_f
            assert plan.offload | plan.evict == prev_f - cand_f
            assert not plan.offload & plan.evict
            assert not plan.load & (plan.offload | plan.evict)
            assert plan.load | (prev_f & cand_f) == plan.new_active
        else:
            assert plan.overlap >= gamma
            assert plan.new_active == prev_f
            assert plan.load == plan.offload == plan.evict == frozenset()

    # strict "<" boundary: overlap exactly equal to gamma stays untriggered
    for _ in range(200):
        candidate, prev, _, _ = _random_plan_tuple(rng)
        gamma_eq = len(frozenset(candidate) & frozenset(prev)) / len(candidate)
        plan = plan_swap(candidate, prev, set(), SwapPolicy(gamma_eq))
        assert not plan.triggered

    # randomized 50-step residency sequence: a pair in the slow registry is
    # never offloaded again (its later ledger offload bytes are zero)
    store = TierStore()
    engine = TransferEngine(store)
    blocks = list(range(16))
    entry_bytes = {}
    try:
        active = set(range(8))
        for b in blocks:
            rng_entry = np.random.default_rng(100 + b)
            entry = KvBlockEntry(
                layer=0,
                block_id=b,
                keys=rng_entry.standard_normal((2, 8, 4)).astype(np.float32),
                values=rng_entry.standard_normal((2, 8, 4)).astype(np.float32),
                positions=np.arange(b * 8, (b + 1) * 8, dtype=np.int64),
                byte_size=kv_entry_bytes(8, 2, 4, 2),
            )
            entry_bytes[b] = entry.byte_size
            if b in active:
                store.put_fast(entry)
            else:
                store.put_slow(entry)
        offload_bytes_per_pair: dict[int, list[int]] = {}
        for step in range(50):
            candidate = {0} | set(
                rng.choice(blocks, size=7, replace=False).tolist()
            )
            mem = {b for b in active if store.has_slow(0, b)}
            plan = plan_swap(candidate, active, mem, SwapPolicy(1.0))
            if not plan.triggered:
                continue
            ops = []
            for b in sorted(plan.evict):
                ops.append(TransferOp("evict", 0, b))
            for b in sorted(plan.offload):
                ops.append(TransferOp("evict" if store.has_slow(0, b) else "offload", 0, b))
            for b in sorted(plan.load):
                if not store.has_fast(0, b):
                    ops.append(TransferOp("load", 0, b))
            ticket = engine.submit(ops)
            engine.await_ticket(ticket)
            for rec in ticket.records:
                if rec.direction == "offload":
                    offload_bytes_per_pair.setdefault(rec.block_id, []).append(rec.bytes_moved)
            active = set(plan.new_active)
        for b, per_pair in offload_bytes_per_pair.items():
            assert len(per_pair) == 1 and per_pair[0] == entry_bytes[b], (
                f"block {b} re-offloaded after entering the slow registry"
            )
    finally:
        engine.shutdown()
    print(
        "\nCRITERION 4 PASS - 10k plan tuples satisfy all set identities, "
        "overlap == gamma stays untriggered, no pair re-offloaded in 50-step fuzz"
    )


def test_criterion_5_overlap_hiding():
    # exact hiding: fetch <= FFN + QKV never stalls
    params = TimelineParams(8, 3, 7, 4, 1, {2: 7, 5: 6})
    result = simulate_timeline(params)
    assert result.stall_total == 0
    assert result.makespan == 8 * (3 + 7 + 4)

    rng = np.random.default_rng(5)
    for _ in range(100):
        n_layers = int(rng.integers(2, 10))
        layer = int(rng.integers(0, n_layers))
        params = TimelineParams(
            n_layers,
            int(rng.integers(0, 9)),
            int(rng.integers(1, 9)),
            int(rng.integers(0, 9)),
            int(rng.integers(1, 4)),
            {layer: int(rng.integers(0, 13))},
        )
        overlap = simulate_timeline(params, "overlap")
        serial = simulate_timeline(params, "serial")
        fetch = params.fetch_blocks[layer] * params.t_fetch_blk
        window = params.t_ffn + (params.t_qkv if layer + 1 < n_layers else 0)
        assert serial.makespan - overlap.makespan == min(fetch, window)
    print(
        "\nCRITERION 5 PASS - full hiding yields stall 0 and compute-sum "
        "makespan; serial placement exceeds overlap by exactly "
        "min(fetch, ffn+qkv) over a 100-point sweep"
    )


def _churn_hook(step, stage, scores, eligible, budget):
    others = sorted(b for b in eligible if b != 0)
    take = min(budget - 1, len(others))
    if take <= 0:
        return (0,)
    start = (step + stage) % len(others)
    return tuple(sorted({0, *(others[(start + i) % len(others)] for i in range(take))}))


def test_criterion_6_tier_consistency_stress():
    steps = 1000
    cfg = tiny_config(seed=6, n_layers=4)
    schedule = PruneSchedule((1, 2), (256, 128), block_size=64, unit_size=8, window=4)
    engine = InferenceEngine(
        cfg,
        schedule,
        SwapPolicy(1.0),
        EngineMode("revival"),
        selection_hook=_churn_hook,
        transfer_latency_s=1e-9,
    )
    rng = np.random.default_rng(6)
    checksums: dict[tuple[int, int, str], int] = {}

    def observe():
        for entry in engine.store.fast_entries():
            key = (*entry.key, "payload")
            seen = checksums.get(key)
            value = entry.checksum()
            if seen is not None:
                assert value == seen, f"entry {entry.key} changed content (torn?)"
            checksums[key] = value
        for entry in engine.store.slow_entries():
            key = (*entry.key, "payload")
            seen = checksums.get(key)
            value = entry.checksum()
            if seen is not None:
                assert value == seen
            checksums[key] = value

    with engine:
        engine.prefill(rng.integers(0, cfg.vocab_size, size=512))
        for step in range(steps):
            engine.decode_step(int(rng.integers(0, cfg.vocab_size)))
            if step % 100 == 0:
                observe()
        engine.finish()
        observe()
        # loaded fast copies stay bit-identical to their slow source
        for entry in engine.store.fast_entries():
            twin = engine.store.get_slow(*entry.key)
            if twin is not None:
                assert entry.checksum() == twin.checksum()
        assert engine.fast_tier_mismatches() == []
        swaps = [r for r in engine.trace.of_kind("swap") if r["step"] > 0]
        triggered = sum(1 for r in swaps if r["triggered"])
        stages = {s.index: list(s.layers) for s in engine.stages}
        mismatches = replay_swap_records(engine.trace.records, stages, gamma=1.0)
        assert mismatches == []
    assert triggered > steps  # both stages churn nearly every step
    print(
        f"\nCRITERION 6 PASS - {steps} decode steps under scripted churn: "
        f"fast tier == declared active sets, {len(checksums)} entry checksums "
        f"stable, {triggered} triggered swaps all reproduced by the plan oracle"
    )


def test_criterion_7_engine_costmodel_reconciliation():
    rng = np.random.default_rng(7)
    block_size = 64
    for case in range(10):
        n_layers = int(rng.integers(3, 7))
        n_stages = int(rng.integers(1, min(3, n_layers - 1) + 1))
        pruning_layers = tuple(
            sorted(rng.choice(range(n_layers), size=n_stages, replace=False).tolist())
        )
        n_blocks = int(rng.integers(4, 11))
        prompt_len = n_blocks * block_size
        budgets = []
        level = n_blocks + int(rng.integers(-2, 3))
        for _ in range(n_stages):
            level = max(1, level - int(rng.integers(1, 4)))
            budgets.append(level * block_size)
        budgets = tuple(budgets)
        cfg = tiny_config(seed=70 + case, n_layers=n_layers)
        schedule = PruneSchedule(pruning_layers, budgets, block_size=block_size)
        with InferenceEngine(cfg, schedule) as engine:
            engine.prefill(rng.integers(0, cfg.vocab_size, size=prompt_len))
            spec = MemSpec(
                n_layers=n_layers,
                kv_heads=cfg.n_heads,
                head_dim=cfg.head_dim,
                kv_bytes_per_elem=cfg.kv_bytes_per_elem,
                prompt_len=prompt_len,
                pruning_layers=pruning_layers,
                token_budgets=budgets,
            )
            want, _ = prompt_kv_bytes(spec)
            got = engine.prompt_kv_fast_bytes
            assert got == want, (
                f"case {case}: measured {got} != closed form {want} "
                f"(layers={pruning_layers}, budgets={budgets}, prompt={prompt_len})"
            )
    print(
        "\nCRITERION 7 PASS - measured fast-tier prompt KV bytes equal the "
        "closed form exactly for 10 random block-aligned schedules"
    )


def test_criterion_8_desk_scale_statement_and_soft_timing():
    print(
        "\nCRITERION 8 (statement) - long-context benchmark accuracy, "
        "needle-style retrieval, and wall-clock TTFT/E2E speedups require "
        "real 7-8B models on specific GPUs and are NOT reproduced here; "
        "criteria 1-7 stand in for them at desk scale."
    )
    cfg = ModelConfig(
        n_layers=3, n_heads=2, head_dim=16, ffn_dim=64, vocab_size=256, seed=8
    )
    ws = init_weights(cfg)
    prompt = np.random.default_rng(8).integers(0, 256, size=8192)

    start = time.perf_counter()
    with InferenceEngine(cfg, PruneSchedule.disabled(), weights=ws) as engine:
        engine.prefill(prompt)
    dense_s = time.perf_counter() - start

    schedule = PruneSchedule((1,), (2048,), block_size=64)
    start = time.perf_counter()
    with InferenceEngine(cfg, schedule, weights=ws) as engine:
        engine.prefill(prompt)
    pruned_s = time.perf_counter() - start

    faster = pruned_s < dense_s
    print(
        f"CRITERION 8 SOFT CHECK (non-gating) - 8k-token prefill: dense "
        f"{dense_s:.2f}s vs pruned {pruned_s:.2f}s -> pruned "
        f"{'faster' if faster else 'NOT faster'} "
        f"({dense_s / pruned_s:.2f}x)"
    )

"""Quick self-contained consistency checks behind `trimkv selftest`.

A fast subset of the full test suite: memory-table constants, a small dense
equivalence run, scoring/selection spot checks against loop oracles, swap set
identities, and the timeline hiding identity. Prints one PASS/FAIL line per
check; exit code 3 if anything fails.
"""

from __future__ import annotations

import numpy as np

from . import costmodel
from .blockindex import PruneSchedule, build_rep_keys, score_blocks, select_candidates
from .engine import InferenceEngine
from .model import ModelConfig, init_weights
from .reference import dense_logits
from .swap import SwapPolicy, plan_swap

MEMTABLE_EXPECTED = {
    8192: (1.00, 0.80, 20.3),
    16384: (2.00, 1.11, 44.5),
    24576: (3.00, 1.42, 52.6),
    28672: (3.50, 1.58, 54.9),
    32768: (4.00, 1.73, 56.6),
}


def _check_memtable() -> bool:
    spec = costmodel.MemSpec(32, 8, 128, 2, 32768, (10, 20, 30), (8192, 4096, 2048))
    rows = costmodel.memory_table(spec, sorted(MEMTABLE_EXPECTED))
    for row in rows:
        full, pruned, saving = MEMTABLE_EXPECTED[row.prompt_len]
        if abs(row.full_gib - full) > 0.01 or abs(row.pruned_gib - pruned) > 0.01:
            return False
        if abs(row.saving_pct - saving) > 0.1:
            return False
    return True


def _check_dense_equivalence() -> bool:
    cfg = ModelConfig(n_layers=2, n_heads=2, head_dim=8, ffn_dim=32, vocab_size=64, seed=7)
    weights = init_weights(cfg)
    rng = np.random.default_rng(7)
    prompt = rng.integers(0, cfg.vocab_size, size=96)
    with InferenceEngine(cfg, PruneSchedule.disabled(), weights=weights) as engine:
        got = engine.prefill(prompt)
    want = dense_logits(weights, prompt)[-1]
    return float(np.max(np.abs(got - want))) <= 1e-5


def _check_scoring() -> bool:
    rng = np.random.default_rng(11)
    heads, dim = 2, 4
    keys = {b: rng.standard_normal((heads, 16, dim)).astype(np.float32) for b in range(5)}
    reps = build_rep_keys(0, keys, unit_size=4)
    probe = rng.standard_normal((heads, dim)).astype(np.float32)
    scores = score_blocks(probe, reps, range(5))
    for b, arr in keys.items():
        best = -np.inf
        for m in range(4):
            acc = 0.0
            for h in range(heads):
                unit = arr[h, m * 4 : (m + 1) * 4]
                acc += float(np.dot(unit.mean(axis=0), probe[h]))
            best = max(best, acc / heads)
        if abs(best - scores[b]) > 1e-6:
            return False
    picked = select_candidates(scores, 3)
    brute = tuple(
        sorted([0] + sorted((b for b in scores if b != 0), key=lambda b: (-scores[b], b))[:2])
    )
    return picked == brute


def _check_swap() -> bool:
    rng = np.random.default_rng(3)
    for _ in range(200):
        universe = list(range(12))
        cand = {0} | set(rng.choice(universe, size=5, replace=False).tolist())
        prev = {0} | set(rng.choice(universe, size=5, replace=False).tolist())
        mem = set(rng.choice(universe, size=4, replace=False).tolist())
        plan = plan_swap(cand, prev, mem, SwapPolicy(float(rng.uniform(0, 1))))
        if plan.triggered:
            if plan.load & prev or plan.offload & mem:
                return False
            if (plan.offload | plan.evict) != prev - cand:
                return False
        elif plan.new_active != frozenset(prev):
            return False
    return True


def _check_timeline() -> bool:
    params = costmodel.TimelineParams(
        n_layers=4, t_qkv=2, t_attn=5, t_ffn=3, t_fetch_blk=1, fetch_blocks={1: 4}
    )
    result = costmodel.simulate_timeline(params)
    compute_sum = 4 * (2 + 5 + 3)
    if result.stall_total != 0 or result.makespan != compute_sum:
        return False
    serial = costmodel.simulate_timeline(params, "serial")
    return serial.makespan - result.makespan == min(4 * 1, 3 + 2)


def run_selftest() -> int:
    checks = [
        ("memory table constants", _check_memtable),
        ("dense equivalence (small)", _check_dense_equivalence),
        ("scoring/selection oracles (small)", _check_scoring),
        ("swap set identities (sample)", _check_swap),
        ("timeline hiding identity", _check_timeline),
    ]
    failures = 0
    for name, fn in checks:
        ok = fn()
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 3

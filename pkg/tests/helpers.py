"""Shared loop oracles and replay harnesses for the test suite.

Everything here is written independently of the package's computation paths:
plain Python loops and float arithmetic, so a kernel bug cannot hide in its
own oracle.
"""

from __future__ import annotations

import math

import numpy as np


def brute_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for x in range(k):
                acc += float(a[i, x]) * float(b[x, j])
            out[i, j] = acc
    return out


def brute_attention(q, k, v, q_pos, k_pos, scale):
    """Per-element causal softmax attention, heads concatenated."""
    n_heads, n_q, dim = q.shape
    out = np.zeros((n_q, n_heads * dim), dtype=np.float64)
    for h in range(n_heads):
        for i in range(n_q):
            allowed = [j for j in range(len(k_pos)) if k_pos[j] <= q_pos[i]]
            assert allowed, "oracle: empty allowed set"
            logits = []
            for j in allowed:
                s = 0.0
                for x in range(dim):
                    s += float(q[h, i, x]) * float(k[h, j, x])
                logits.append(s * scale)
            top = max(logits)
            exps = [math.exp(s - top) for s in logits]
            z = sum(exps)
            for e, j in zip(exps, allowed):
                w = e / z
                for x in range(dim):
                    out[i, h * dim + x] += w * float(v[h, j, x])
    return out


def brute_rep_keys(keys, unit_size):
    """Per-unit per-head mean of key rows; keys is [H, T, d]."""
    n_heads, n_tokens, dim = keys.shape
    n_units = math.ceil(n_tokens / unit_size)
    reps = np.zeros((n_units, n_heads, dim), dtype=np.float64)
    for m in range(n_units):
        lo, hi = m * unit_size, min((m + 1) * unit_size, n_tokens)
        for h in range(n_heads):
            for x in range(dim):
                acc = 0.0
                for t in range(lo, hi):
                    acc += float(keys[h, t, x])
                reps[m, h, x] = acc / (hi - lo)
    return reps


def brute_block_score(probe, reps):
    """Max over units of the head-averaged dot product; reps is [M, H, d]."""
    n_units, n_heads, dim = reps.shape
    best = -math.inf
    for m in range(n_units):
        acc = 0.0
        for h in range(n_heads):
            dot = 0.0
            for x in range(dim):
                dot += float(probe[h, x]) * float(reps[m, h, x])
            acc += dot
        best = max(best, acc / n_heads)
    return best


def brute_select(scores, budget, sink=0):
    """Full-sort selection with the sink rule and lower-id tie break."""
    others = [b for b in scores if b != sink]
    others.sort(key=lambda b: (-scores[b], b))
    return tuple(sorted([sink] + others[: budget - 1]))


def replay_swap_records(records, stages, gamma):
    """Re-derive every decode swap record from the select records.

    `stages` maps stage index -> list of layer indices it owns. Select
    records provide the candidates; transfer records rebuild the slow-copy
    registry; the standalone plan oracle must reproduce each decode swap
    record exactly. Returns a list of mismatch descriptions (empty = sound).
    """
    from trimkv.swap import SwapPolicy, plan_swap

    mismatches = []
    prev_active: dict[int, frozenset] = {}
    slow_pairs: set[tuple[int, int]] = set()
    selects: dict[tuple[int, int, int], dict] = {}

    for rec in records:
        kind = rec["kind"]
        if kind == "select":
            selects[(rec["step"], rec["stage"], rec["layer"])] = rec
        elif kind == "swap":
            stage = rec["stage"]
            if rec["step"] == 0:
                # prefill install: not routed through the overlap logic
                prev_active[stage] = frozenset(rec["new_active"])
                continue
            sel = selects.get((rec["step"], stage, rec["layer"]))
            if sel is None:
                mismatches.append(f"swap at step {rec['step']} without a select record")
                continue
            candidate = frozenset(sel["candidate"])
            mem_blocks = {
                b
                for b in prev_active[stage]
                if all((l, b) in slow_pairs for l in stages[stage])
            }
            plan = plan_swap(
                candidate,
                prev_active[stage],
                mem_blocks,
                SwapPolicy(gamma),
                stage=stage,
            )
            got = {
                "overlap": rec["overlap"],
                "triggered": rec["triggered"],
                "new_active": tuple(rec["new_active"]),
                "load": tuple(rec["load"]),
                "offload": tuple(rec["offload"]),
                "evict": tuple(rec["evict"]),
            }
            want = {
                "overlap": plan.overlap,
                "triggered": plan.triggered,
                "new_active": tuple(sorted(plan.new_active)),
                "load": tuple(sorted(plan.load)),
                "offload": tuple(sorted(plan.offload)),
                "evict": tuple(sorted(plan.evict)),
            }
            if got != want:
                mismatches.append(
                    f"step {rec['step']} stage {stage}: trace {got} != oracle {want}"
                )
            prev_active[stage] = frozenset(rec["new_active"])
        elif kind == "transfer":
            pair = (rec["layer"], rec["block"])
            if rec["direction"] == "offload":
                slow_pairs.add(pair)
    return mismatches

#!/usr/bin/env python3
"""Knob sweeps on a toy run: gamma, block size, and query window.

For each setting the script runs the same seeded prompt and reports decode
swap traffic and overlap statistics, mirroring the ablation axes the runtime
exposes. Output is one CSV-ish line per setting on stdout.

Usage: python scripts/sweep_knobs.py [--steps 32] [--prompt-len 1024]
"""

import argparse
import sys

import numpy as np

from trimkv.blockindex import PruneSchedule
from trimkv.engine import InferenceEngine, run_generation
from trimkv.model import ModelConfig
from trimkv.swap import SwapPolicy


def run_once(prompt, steps, gamma, block_size, window, seed=0):
    cfg = ModelConfig(
        n_layers=6, n_heads=4, head_dim=16, ffn_dim=128, vocab_size=512, seed=seed
    )
    schedule = PruneSchedule(
        (2, 4), (len(prompt) // 2, len(prompt) // 4),
        block_size=block_size, unit_size=8, window=window,
    )
    with InferenceEngine(cfg, schedule, SwapPolicy(gamma)) as engine:
        run_generation(engine, prompt, steps)
        engine.finish()
        swaps = [r for r in engine.trace.of_kind("swap") if r["step"] > 0]
        triggered = sum(1 for r in swaps if r["triggered"])
        overlaps = [r["overlap"] for r in swaps if r["overlap"] is not None]
        return {
            "triggered": triggered,
            "decisions": len(swaps),
            "overlap_mean": float(np.mean(overlaps)) if overlaps else 1.0,
            "loaded": engine.store.loaded_bytes_total,
            "offloaded": engine.store.offloaded_bytes_total,
            "revived": engine.revival_count,
        }


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--steps", type=int, default=32)
    parser.add_argument("--prompt-len", type=int, default=1024)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    prompt = np.random.default_rng(args.seed).integers(0, 512, size=args.prompt_len)
    print("knob,value,decisions,triggered,overlap_mean,loaded_bytes,offloaded_bytes,revived")
    for gamma in (0.0, 0.5, 0.9, 0.95, 0.99, 1.0):
        r = run_once(prompt, args.steps, gamma, 64, 4, args.seed)
        print(
            f"gamma,{gamma},{r['decisions']},{r['triggered']},"
            f"{r['overlap_mean']:.4f},{r['loaded']},{r['offloaded']},{r['revived']}"
        )
    for block_size in (32, 64, 128):
        r = run_once(prompt, args.steps, 0.9, block_size, 4, args.seed)
        print(
            f"block_size,{block_size},{r['decisions']},{r['triggered']},"
            f"{r['overlap_mean']:.4f},{r['loaded']},{r['offloaded']},{r['revived']}"
        )
    for window in (1, 2, 4, 8, 16):
        r = run_once(prompt, args.steps, 0.9, 64, window, args.seed)
        print(
            f"window,{window},{r['decisions']},{r['triggered']},"
            f"{r['overlap_mean']:.4f},{r['loaded']},{r['offloaded']},{r['revived']}"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())

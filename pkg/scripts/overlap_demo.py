#!/usr/bin/env python3
"""Side-by-side timeline of overlap-aware vs on-demand fetch placement.

Sweeps the per-stage fetch cost and prints, for each value, the makespan of
both placements plus the analytic hiding bound min(fetch, ffn + qkv). The
excess of the serial placement should track that bound exactly.

Usage: python scripts/overlap_demo.py [--layers 8] [--plan-layer 3]
"""

import argparse
import sys

from trimkv.costmodel import TimelineParams, format_timeline, simulate_timeline


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--layers", type=int, default=8)
    parser.add_argument("--plan-layer", type=int, default=3)
    parser.add_argument("--t-qkv", type=int, default=2)
    parser.add_argument("--t-attn", type=int, default=5)
    parser.add_argument("--t-ffn", type=int, default=3)
    parser.add_argument("--show-events", action="store_true")
    args = parser.parse_args()

    window = args.t_ffn + args.t_qkv
    print(f"hiding window = ffn + qkv = {window}")
    print("fetch,overlap_makespan,overlap_stall,serial_makespan,excess,bound")
    for fetch in range(0, 2 * window + 4):
        params = TimelineParams(
            args.layers, args.t_qkv, args.t_attn, args.t_ffn, 1,
            {args.plan_layer: fetch},
        )
        overlap = simulate_timeline(params, "overlap")
        serial = simulate_timeline(params, "serial")
        excess = serial.makespan - overlap.makespan
        print(
            f"{fetch},{overlap.makespan:g},{overlap.stall_total:g},"
            f"{serial.makespan:g},{excess:g},{min(fetch, window)}"
        )
        if args.show_events and fetch == window:
            print(format_timeline(overlap))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Subcommands: run (prefill + decode with trace/report files), memtable (the
closed-form KV memory table), timeline (pipeline overlap simulator), probe
(single-token hidden-state removal divergence), selftest (quick internal
checks). Every flag can also come from a flat key=value config file via
--config; explicit flags win. TRIMKV_TRACE_DIR sets the default output
directory. Exit codes: 0 success, 2 config error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional, Sequence

import numpy as np

from . import costmodel
from .blockindex import PruneSchedule, parse_schedule
from .engine import EngineMode, InferenceEngine, run_generation
from .errors import ConfigError, TrimkvError
from .model import ModelConfig, init_weights, load_weights
from .reference import probe_divergence
from .swap import SwapPolicy
from .trace import TraceWriter

TRACE_DIR_ENV = "TRIMKV_TRACE_DIR"

MEMTABLE_SCHEDULE_DEFAULT = "10:8192,20:4096,30:2048"
MEMTABLE_LENGTHS_DEFAULT = "8192,16384,24576,28672,32768"


def _trace_dir() -> str:
    return os.environ.get(TRACE_DIR_ENV, ".")


def _out_path(value: Optional[str], default_name: str) -> str:
    if value:
        return value
    return os.path.join(_trace_dir(), default_name)


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, value = line.split("=", 1)
                values[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return values


def _parse_with_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse twice so config-file values sit between defaults and CLI flags."""
    first, _ = parser.parse_known_args(argv)
    config_path = getattr(first, "config", None)
    if not config_path:
        return parser.parse_args(argv)
    file_values = _read_config_file(config_path)
    actions = {
        a.option_strings[-1].lstrip("-"): a for a in parser._actions if a.option_strings
    }
    injected: list[str] = []
    for key, value in file_values.items():
        action = actions.get(key)
        if action is None:
            raise ConfigError(f"config file: unknown key {key!r}")
        if key in ("config", "print-config"):
            continue
        if action.nargs == 0:  # boolean switch
            if value.strip().lower() in ("1", "true", "yes", "on"):
                injected.append(f"--{key}")
            continue
        injected.append(f"--{key}={value}")
    return parser.parse_args(injected + argv)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=8, help="transformer layer count")
    p.add_argument("--heads", type=int, default=4, help="attention head count")
    p.add_argument("--head-dim", type=int, default=16, help="per-head dimension (even)")
    p.add_argument("--ffn-dim", type=int, default=128, help="FFN inner dimension")
    p.add_argument("--vocab", type=int, default=512, help="vocabulary size")
    p.add_argument("--seed", type=int, default=0, help="weight/prompt seed")
    p.add_argument("--kv-bytes", type=int, default=2, help="modeled bytes per KV element")
    p.add_argument("--weights", default="", help="optional raw weights file to load")


def _add_prompt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt-len", type=int, default=4096, help="synthetic prompt length")
    p.add_argument(
        "--prompt-file", default="", help="file of whitespace-separated token ids"
    )


def _add_prune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--schedule",
        default="2:2048,4:1024,6:512",
        help='pruning schedule "layer:budget,..." (empty disables pruning)',
    )
    p.add_argument("--block-size", type=int, default=64)
    p.add_argument("--unit-size", type=int, default=8)
    p.add_argument("--gamma", type=float, default=0.9, help="swap trigger threshold")
    p.add_argument("--window", type=int, default=4, help="local query window size")
    p.add_argument("--mode", choices=("revival", "strict"), default="revival")
    p.add_argument(
        "--decode-budgets",
        default="",
        help="optional per-stage decode block budgets, comma separated",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimkv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="prefill + decode with trace and report files")
    _add_model_flags(run)
    _add_prompt_flags(run)
    _add_prune_flags(run)
    run.add_argument("--steps", type=int, default=16, help="decode steps")
    run.add_argument("--trace-out", default="", help="trace file path (JSONL)")
    run.add_argument("--report-out", default="", help="report file path (text)")
    run.add_argument("--config", default="", help="key=value config file")
    run.add_argument("--print-config", action="store_true", help="print effective config and exit")

    mem = sub.add_parser("memtable", help="closed-form prompt KV memory table")
    mem.add_argument("--layers", type=int, default=32)
    mem.add_argument("--kv-heads", type=int, default=8)
    mem.add_argument("--head-dim", type=int, default=128)
    mem.add_argument("--kv-bytes", type=int, default=2)
    mem.add_argument("--schedule", default=MEMTABLE_SCHEDULE_DEFAULT)
    mem.add_argument("--lengths", default=MEMTABLE_LENGTHS_DEFAULT)
    mem.add_argument("--json", action="store_true", help="emit structured rows instead")
    mem.add_argument("--config", default="")

    tl = sub.add_parser("timeline", help="compute/transfer overlap simulator")
    tl.add_argument("--layers", type=int, default=8)
    tl.add_argument("--t-qkv", type=float, default=2.0)
    tl.add_argument("--t-attn", type=float, default=4.0)
    tl.add_argument("--t-ffn", type=float, default=3.0)
    tl.add_argument("--t-fetch-blk", type=float, default=1.0)
    tl.add_argument("--fetch", default="2:4,4:2", help='fetch plans "layer:blocks,..."')
    tl.add_argument("--placement", choices=("overlap", "serial", "both"), default="both")
    tl.add_argument("--json", action="store_true", help="emit structured rows instead")
    tl.add_argument("--config", default="")

    probe = sub.add_parser("probe", help="hidden-state removal divergence report")
    _add_model_flags(probe)
    probe.add_argument("--prompt-len", type=int, default=64)
    probe.add_argument("--prompt-file", default="")
    probe.add_argument("--prune-token", type=int, required=True)
    probe.add_argument(
        "--prune-layer",
        type=int,
        default=-1,
        help="removal layer; omit to sweep every layer (n_layers = no removal)",
    )
    probe.add_argument("--trace-out", default="")
    probe.add_argument("--config", default="")

    sub.add_parser("selftest", help="quick internal consistency checks")
    return parser


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

_RUN_CONFIG_KEYS = (
    "layers", "heads", "head-dim", "ffn-dim", "vocab", "seed", "kv-bytes",
    "weights", "prompt-len", "prompt-file", "schedule", "block-size",
    "unit-size", "gamma", "window", "mode", "decode-budgets", "steps",
    "trace-out", "report-out",
)


def _effective_config_text(args: argparse.Namespace) -> str:
    lines = []
    for key in _RUN_CONFIG_KEYS:
        lines.append(f"{key}={getattr(args, key.replace('-', '_'))}")
    return "\n".join(lines)


def _load_prompt(args: argparse.Namespace) -> np.ndarray:
    if args.prompt_file:
        try:
            with open(args.prompt_file, "r", encoding="utf-8") as f:
                ids = [int(tok) for tok in f.read().split()]
        except OSError as exc:
            raise ConfigError(f"prompt-file: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"prompt-file: not whitespace-separated ints: {exc}") from exc
        if not ids:
            raise ConfigError("prompt-file: file contains no token ids")
        return np.asarray(ids, dtype=np.int64)
    if args.prompt_len < 1:
        raise ConfigError("prompt-len must be >= 1")
    rng = np.random.default_rng(args.seed)
    return rng.integers(0, args.vocab, size=args.prompt_len, dtype=np.int64)


def _build_engine_parts(args: argparse.Namespace):
    cfg = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        head_dim=args.head_dim,
        ffn_dim=args.ffn_dim,
        vocab_size=args.vocab,
        kv_bytes_per_elem=args.kv_bytes,
        seed=args.seed,
    )
    cfg.validate()
    layers, budgets = parse_schedule(args.schedule)
    schedule = PruneSchedule(
        layers, budgets, args.block_size, args.unit_size, args.window
    )
    schedule.validate(cfg.n_layers)
    policy = SwapPolicy(args.gamma)
    overrides = None
    if args.decode_budgets.strip():
        try:
            overrides = tuple(int(x) for x in args.decode_budgets.split(","))
        except ValueError as exc:
            raise ConfigError(f"decode-budgets: {exc}") from exc
    mode = EngineMode(args.mode, overrides)
    weights = load_weights(args.weights) if args.weights else init_weights(cfg)
    if args.weights and weights.cfg is None:
        raise ConfigError("weights: file carries no model config header")
    return cfg, schedule, policy, mode, weights


def cmd_run(args: argparse.Namespace) -> int:
    if args.print_config:
        print(_effective_config_text(args))
        return 0
    cfg, schedule, policy, mode, weights = _build_engine_parts(args)
    prompt = _load_prompt(args)
    if prompt.max() >= cfg.vocab_size:
        raise ConfigError("prompt-file: token id out of vocabulary range")
    trace_path = _out_path(args.trace_out, "trimkv-trace.jsonl")
    report_path = _out_path(args.report_out, "trimkv-report.txt")
    if os.path.exists(trace_path):
        os.remove(trace_path)

    writer = TraceWriter(trace_path)
    t0 = time.perf_counter()
    with InferenceEngine(
        cfg, schedule, policy, mode, weights=weights, trace=writer
    ) as engine:
        prefill_start = time.perf_counter()
        tokens, _ = run_generation(engine, prompt, args.steps)
        decode_end = time.perf_counter()
        engine.finish()
        report = _run_report(
            args, engine, prompt, tokens, decode_end - prefill_start
        )
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report)
    print(report)
    print(f"trace written to {trace_path}")
    print(f"report written to {report_path}")
    print(f"total wall {time.perf_counter() - t0:.3f}s")
    return 0


def _run_report(args, engine: InferenceEngine, prompt, tokens, wall_s: float) -> str:
    cfg = engine.cfg
    spec = costmodel.MemSpec(
        n_layers=cfg.n_layers,
        kv_heads=cfg.n_heads,
        head_dim=cfg.head_dim,
        kv_bytes_per_elem=cfg.kv_bytes_per_elem,
        prompt_len=len(prompt),
        pruning_layers=engine.schedule.pruning_layers,
        token_budgets=engine.schedule.token_budgets,
    )
    closed_bytes, closed_gib = costmodel.prompt_kv_bytes(spec)
    flops = costmodel.prefill_flops(spec, cfg.hidden_dim, cfg.ffn_dim)
    swaps = engine.trace.of_kind("swap")
    decode_swaps = [r for r in swaps if r["step"] > 0]
    triggered = [r for r in decode_swaps if r["triggered"]]
    overlaps = [r["overlap"] for r in decode_swaps if r["overlap"] is not None]
    transfers = engine.trace.of_kind("transfer")
    loads = [r for r in transfers if r["direction"] == "load"]
    offloads = [r for r in transfers if r["direction"] == "offload"]
    evicts = [r for r in transfers if r["direction"] == "evict"]
    decode_loaded = sum(r["bytes"] for r in loads if r["step"] > 0)

    prefill_footprint = next(r for r in engine.trace.of_kind("footprint"))
    lines = [
        "== config ==",
        _effective_config_text(args),
        "",
        "== prefill ==",
        f"prompt tokens {len(prompt)}  blocks {len(engine.block_table)}",
        f"fast prompt kv bytes measured {prefill_footprint['fast_bytes']}"
        f" ({prefill_footprint['fast_bytes'] / costmodel.GIB:.2f} GiB)",
        f"fast prompt kv bytes closed-form {closed_bytes} ({closed_gib:.2f} GiB)",
        f"rep key bytes {engine.rep_key_bytes}",
        f"boundary checkpoints {engine.store.checkpoint_count()}",
        f"flops dense {flops.dense.total}  pruned {flops.pruned.total}"
        f"  ratio {flops.ratio:.4f}",
        "",
        "== decode ==",
        f"steps {len(tokens)}  tokens {tokens}",
        f"swap decisions {len(decode_swaps)}  triggered {len(triggered)}",
        f"overlap mean {np.mean(overlaps):.4f}  min {np.min(overlaps):.4f}"
        if overlaps
        else "overlap n/a (no pruning stages)",
        f"transfer ops load {len(loads)} offload {len(offloads)} evict {len(evicts)}",
        f"bytes loaded total {engine.store.loaded_bytes_total}"
        f" (decode {decode_loaded})  offloaded total {engine.store.offloaded_bytes_total}",
        f"revived blocks {engine.revival_count}",
        f"final fast bytes {engine.store.fast_bytes_used}"
        f"  slow bytes {engine.store.slow_bytes_used}"
        f"  response bytes {engine.response_kv_bytes}",
        f"wall seconds {wall_s:.3f}",
        f"trace records {len(engine.trace.records)} (schema-validated on emit)",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# memtable / timeline / probe / selftest
# ---------------------------------------------------------------------------


def cmd_memtable(args: argparse.Namespace) -> int:
    layers, budgets = parse_schedule(args.schedule)
    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"lengths: {exc}") from exc
    if not lengths:
        raise ConfigError("lengths: at least one prompt length required")
    spec = costmodel.MemSpec(
        n_layers=args.layers,
        kv_heads=args.kv_heads,
        head_dim=args.head_dim,
        kv_bytes_per_elem=args.kv_bytes,
        prompt_len=lengths[0],
        pruning_layers=layers,
        token_budgets=budgets,
    )
    rows = costmodel.memory_table(spec, lengths)
    if args.json:
        for row in rows:
            print(
                json.dumps(
                    {
                        "prompt_len": row.prompt_len,
                        "full_gib": row.full_gib,
                        "pruned_gib": row.pruned_gib,
                        "saving_pct": row.saving_pct,
                    },
                    separators=(",", ":"),
                )
            )
    else:
        print(costmodel.format_memory_table(rows))
    return 0


def cmd_timeline(args: argparse.Namespace) -> int:
    fetch: dict[int, int] = {}
    if args.fetch.strip():
        for part in args.fetch.split(","):
            try:
                layer_s, blocks_s = part.split(":")
                fetch[int(layer_s)] = int(blocks_s)
            except ValueError as exc:
                raise ConfigError(f"fetch: cannot parse entry {part!r}") from exc
    params = costmodel.TimelineParams(
        n_layers=args.layers,
        t_qkv=args.t_qkv,
        t_attn=args.t_attn,
        t_ffn=args.t_ffn,
        t_fetch_blk=args.t_fetch_blk,
        fetch_blocks=fetch,
    )
    placements = ("overlap", "serial") if args.placement == "both" else (args.placement,)
    results = {}
    for placement in placements:
        result = costmodel.simulate_timeline(params, placement)
        results[placement] = result
        if args.json:
            for e in result.events:
                print(
                    json.dumps(
                        {
                            "placement": placement,
                            "track": e.track,
                            "label": e.label,
                            "layer": e.layer,
                            "start": e.start,
                            "end": e.end,
                        },
                        separators=(",", ":"),
                    )
                )
        else:
            print(f"-- placement: {placement} --")
            print(costmodel.format_timeline(result))
    if len(results) == 2 and not args.json:
        delta = results["serial"].makespan - results["overlap"].makespan
        print(f"serial placement exceeds overlap placement by {delta:g}")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    cfg = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        head_dim=args.head_dim,
        ffn_dim=args.ffn_dim,
        vocab_size=args.vocab,
        kv_bytes_per_elem=args.kv_bytes,
        seed=args.seed,
    )
    cfg.validate()
    prompt = _load_prompt(args)
    if not (0 <= args.prune_token < len(prompt)):
        raise ConfigError("prune-token must lie in [0, prompt length)")
    if args.prune_layer != -1 and not (0 <= args.prune_layer <= cfg.n_layers):
        raise ConfigError("prune-layer must lie in [0, n_layers]")
    weights = load_weights(args.weights) if args.weights else init_weights(cfg)
    layers = (
        range(cfg.n_layers + 1) if args.prune_layer == -1 else [args.prune_layer]
    )
    writer = TraceWriter(args.trace_out or None)
    print(f"prune token {args.prune_token} (qualitative report; toy weights)")
    print(f"{'layer':>6}{'max_abs':>14}{'cosine':>10}")
    for layer in layers:
        max_abs, cosine = probe_divergence(weights, prompt, args.prune_token, layer)
        writer.emit(
            "probe",
            step=0,
            stage=None,
            layer=layer,
            prune_token=args.prune_token,
            prune_layer=layer,
            max_abs=max_abs,
            cosine=cosine,
        )
        print(f"{layer:>6}{max_abs:>14.6e}{cosine:>10.4f}")
    writer.flush()
    return 0


def cmd_selftest(_: argparse.Namespace) -> int:
    from .selftest import run_selftest

    return run_selftest()


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_help()
        return 2
    command = argv[0]
    try:
        sub_actions = next(
            a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
        )
        if command in sub_actions.choices:
            args = _parse_with_config(sub_actions.choices[command], argv[1:])
            args.command = command
        else:
            args = parser.parse_args(argv)
        handler = {
            "run": cmd_run,
            "memtable": cmd_memtable,
            "timeline": cmd_timeline,
            "probe": cmd_probe,
            "selftest": cmd_selftest,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrimkvError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Block-wise hidden-state pruning runtime with a two-tier KV cache."""

from .blockindex import (
    BlockTable,
    LocalQueryWindow,
    PruneSchedule,
    RepKeys,
    build_rep_keys,
    partition_blocks,
    score_blocks,
    select_candidates,
)
from .costmodel import (
    FlopReport,
    MemSpec,
    TimelineParams,
    memory_table,
    prefill_flops,
    prompt_kv_bytes,
    simulate_timeline,
)
from .engine import EngineMode, InferenceEngine, run_generation
from .model import ModelConfig, WeightSet, init_weights, load_weights, save_weights
from .swap import SwapPlan, SwapPolicy, overlap_ratio, plan_swap
from .tiermem import KvBlockEntry, TierStore, TransferEngine, TransferOp
from .trace import TraceWriter, read_trace

__all__ = [
    "BlockTable",
    "EngineMode",
    "FlopReport",
    "InferenceEngine",
    "KvBlockEntry",
    "LocalQueryWindow",
    "MemSpec",
    "ModelConfig",
    "PruneSchedule",
    "RepKeys",
    "SwapPlan",
    "SwapPolicy",
    "TierStore",
    "TimelineParams",
    "TraceWriter",
    "TransferEngine",
    "TransferOp",
    "WeightSet",
    "build_rep_keys",
    "init_weights",
    "load_weights",
    "memory_table",
    "overlap_ratio",
    "partition_blocks",
    "plan_swap",
    "prefill_flops",
    "prompt_kv_bytes",
    "read_trace",
    "run_generation",
    "save_weights",
    "score_blocks",
    "select_candidates",
    "simulate_timeline",
]

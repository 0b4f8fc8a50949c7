"""Adaptive sparse attention over an offloaded KV cache.

Exact segment-merged attention, query-aware block selection, per-head error
budgets, a feature predictor, granularity/budget co-selection and a
priority scheduler over host/accelerator workers, plus a synthetic workload
generator to exercise all of it.
"""
__version__ = "0.1.0"

from .attention import (
    GroupView,
    PartialOutput,
    SegmentedKvCache,
    full_attention,
    gqa_group_view,
    merge,
    merge_partials,
    segment_attention,
)
from .blocks import (
    BlockMetadata,
    SelectionResult,
    block_score,
    budget_to_blocks,
    build_metadata,
    select_budget,
    sparse_attention,
    topk_blocks,
)
from .budget import (
    ErrorBudgetConfig,
    HeadProperties,
    fit_curve,
    label_head,
    label_streaming,
    make_probes,
    min_budget,
    output_deviation,
)
from .errors import FluxError
from .features import FEATURE_NAMES, approx_lse_cpu, decode_features, prefill_stats
from .predictor import PredictorModel, TrainConfig, load_model, save_model, train
from .scheduler import SparseTask, TaskQueue, WorkerProfile, default_workers, enqueue_batch, run, run_baseline
from .selector import GroupPlan, plan_group, priority, volume
from .workload import Workload, WorkloadSpec, export_trace, generate, import_trace

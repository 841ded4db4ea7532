"""Conversation KV-state restoration by mixed recomputation and loading."""

from .analysis import (
    ClassifierConfig,
    DistanceMatrix,
    LayerClassReport,
    SimilarityAccumulator,
    classify_layers,
    estimate_distances,
    stable_squared_distance,
)
from .engine import (
    AttentionRecord,
    KVCacheLayer,
    Model,
    ModelConfig,
    build_model,
    decode_step,
    greedy_generate,
    partial_prefix_recompute,
    prefill,
)
from .errors import (
    AccountingError,
    ClassificationError,
    ConfigError,
    KrulError,
    LoadError,
    PlanInvalidError,
    RestorationGapError,
    SnapshotError,
    StateCorruptionError,
)
from .harness import BenchConfig, BenchReport, WorkloadSpec, gen_workload, run_bench, run_conversation
from .kvstore import KVSnapshot, MergeMode, StorageReport, compress_and_snapshot, expand, load, loads, save
from .plan import RestorationPlan, blob_layout, build_plan, validate_plan
from .scheduler import CostModel, calibrate_rc, calibration_table, execute_restore, simulate_pipeline
from .strategy import CompressionStrategy, StrategyConfig, select_strategy, validate_strategy

__version__ = "0.1.0"

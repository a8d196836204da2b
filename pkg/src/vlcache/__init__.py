"""KV-cache compression over attention traces.

Measures per-layer attention sparsity with streaming softmax statistics,
splits a global cache budget across layers in proportion to measured
density, scores prompt tokens from post-vision query rows, and evicts
the rest. Ships baselines (accumulated attention, sliding window,
positional init+recent), quality metrics against a decoding oracle, and
a CPU micro-benchmark of full vs compressed decode.
"""

from ._kernels import BACKEND
from .attention import (
    DEFAULT_P,
    DEFAULT_TILE,
    AttentionStats,
    QueryWindow,
    dense_attention_rows,
    streaming_stats,
)
from .bench import (
    BenchReport,
    BenchSpec,
    OverheadReport,
    estimate_bytes,
    kv_cache_bytes,
    latency_throughput_curve,
    run_bench,
    stats_overhead,
    synthesize_values,
)
from .budget import (
    BudgetAllocation,
    BudgetConfig,
    allocate_pyramid,
    allocate_sparsity_aware,
    allocate_uniform,
    measure_gamma_mean,
)
from .errors import (
    DegenerateSparsityError,
    SpecTooLargeError,
    TraceFormatError,
    TraceTruncatedError,
    TraceValueError,
    ValidationError,
    VLCacheError,
    ZeroVarianceError,
)
from .evaluate import (
    EvalReport,
    EvalWindow,
    build_report,
    cache_hit_rate,
    contribution,
    coverage,
    oracle_scores,
)
from .scoring import (
    AccumulatedAttention,
    CompressionResult,
    EvictionConfig,
    KeptSet,
    PostVision,
    ScoringConfig,
    SlidingWindow,
    StreamingForBudget,
    StreamingInitRecent,
    compress_cache,
    evict,
    head_scores,
    policy_from_name,
    policy_window,
    score_tokens,
    top_k_indices,
)
from .sparsity import (
    LayerSparsity,
    SparsityConfig,
    curve_similarity,
    decoding_sparsity,
    post_vision_sparsity,
    prefill_sparsity,
    threshold_filter,
    window_sparsity,
)
from .trace import (
    AttentionTrace,
    GenSpec,
    ModalityLayout,
    TraceHeader,
    generate_trace,
    read_trace,
    write_trace,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DEFAULT_P",
    "DEFAULT_TILE",
    "AccumulatedAttention",
    "AttentionStats",
    "AttentionTrace",
    "BenchReport",
    "BenchSpec",
    "BudgetAllocation",
    "BudgetConfig",
    "CompressionResult",
    "DegenerateSparsityError",
    "EvalReport",
    "EvalWindow",
    "EvictionConfig",
    "GenSpec",
    "KeptSet",
    "LayerSparsity",
    "ModalityLayout",
    "OverheadReport",
    "PostVision",
    "QueryWindow",
    "ScoringConfig",
    "SlidingWindow",
    "SparsityConfig",
    "SpecTooLargeError",
    "StreamingForBudget",
    "StreamingInitRecent",
    "TraceFormatError",
    "TraceHeader",
    "TraceTruncatedError",
    "TraceValueError",
    "VLCacheError",
    "ValidationError",
    "ZeroVarianceError",
    "allocate_pyramid",
    "allocate_sparsity_aware",
    "allocate_uniform",
    "build_report",
    "cache_hit_rate",
    "compress_cache",
    "contribution",
    "coverage",
    "curve_similarity",
    "decoding_sparsity",
    "dense_attention_rows",
    "estimate_bytes",
    "evict",
    "generate_trace",
    "head_scores",
    "kv_cache_bytes",
    "latency_throughput_curve",
    "measure_gamma_mean",
    "oracle_scores",
    "policy_from_name",
    "policy_window",
    "post_vision_sparsity",
    "prefill_sparsity",
    "read_trace",
    "run_bench",
    "score_tokens",
    "stats_overhead",
    "streaming_stats",
    "synthesize_values",
    "threshold_filter",
    "top_k_indices",
    "window_sparsity",
    "write_trace",
    "__version__",
]

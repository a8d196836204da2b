"""Token scoring policies, eviction, and whole-cache compression.

Attention-based policies rank prompt tokens by the post-softmax mass they
received from a window of query rows (the streaming col_score), computed
over all causally visible keys:

    AccumulatedAttention   all m prompt rows
    SlidingWindow(w)       the last w prompt rows
    PostVision             the tau post-vision rows

StreamingInitRecent is positional: it keeps the first n_init and last
n_recent prompt tokens. For grouped-query attention a KV head is scored
by the mean over its query-head group. Eviction reserves the most recent
ceil(recent_window_frac * kept_count) prompt positions unconditionally
and fills the rest by score, ties broken toward the more recent token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attention import DEFAULT_P, DEFAULT_TILE, QueryWindow, streaming_stats
from .budget import BudgetAllocation
from .errors import ValidationError
from .trace import AttentionTrace, TraceHeader


@dataclass(frozen=True)
class ScoringConfig:
    p: float = DEFAULT_P
    tile: int = DEFAULT_TILE


@dataclass(frozen=True)
class EvictionConfig:
    recent_window_frac: float = 0.10

    def __post_init__(self) -> None:
        if not 0.0 <= self.recent_window_frac <= 1.0:
            raise ValidationError(
                f"recent_window_frac: must be in [0, 1], got {self.recent_window_frac}"
            )


@dataclass(frozen=True)
class AccumulatedAttention:
    """Scores summed over every prompt row (the H2O-style accumulation)."""


@dataclass(frozen=True)
class SlidingWindow:
    """Scores summed over the last window_rows prompt rows."""

    window_rows: int

    def __post_init__(self) -> None:
        if self.window_rows < 1:
            raise ValidationError(f"window_rows: must be >= 1, got {self.window_rows}")


@dataclass(frozen=True)
class PostVision:
    """Scores summed over the post-vision rows.

    On a trace without a post-vision segment, fallback_window picks the
    last min(m, fallback_window) prompt rows instead; leaving it unset
    makes such traces an error.
    """

    fallback_window: int | None = None

    def __post_init__(self) -> None:
        if self.fallback_window is not None and self.fallback_window < 1:
            raise ValidationError(
                f"fallback_window: must be >= 1, got {self.fallback_window}"
            )


@dataclass(frozen=True)
class StreamingInitRecent:
    """Keep the first n_init and the last n_recent prompt tokens."""

    n_init: int
    n_recent: int

    def __post_init__(self) -> None:
        if self.n_init < 0 or self.n_recent < 0 or self.n_init + self.n_recent < 1:
            raise ValidationError("n_init/n_recent: must be non-negative and not both zero")

    @classmethod
    def for_budget(cls, k: int) -> "StreamingInitRecent":
        """Default split for a budget of k tokens: n_init = ceil(0.1 * k)."""
        if k < 1:
            raise ValidationError(f"k: must be >= 1, got {k}")
        n_init = math.ceil(0.1 * k)
        return cls(n_init=n_init, n_recent=k - n_init)


@dataclass(frozen=True)
class StreamingForBudget:
    """StreamingInitRecent sized to each layer's kept count at compression
    time; cannot score on its own."""

    def resolve(self, kept_count: int) -> StreamingInitRecent:
        return StreamingInitRecent.for_budget(kept_count)


ScoringPolicy = (
    AccumulatedAttention
    | SlidingWindow
    | PostVision
    | StreamingInitRecent
    | StreamingForBudget
)


def policy_window(policy: ScoringPolicy, header: TraceHeader) -> QueryWindow:
    """Query-row window an attention-based policy scores over."""
    m = header.prompt_len
    if isinstance(policy, AccumulatedAttention):
        return QueryWindow(0, m)
    if isinstance(policy, SlidingWindow):
        return QueryWindow(m - min(policy.window_rows, m), m)
    if isinstance(policy, PostVision):
        tau = header.post_vision_len
        if tau >= 1:
            return QueryWindow(m - tau, m)
        if policy.fallback_window is None:
            raise ValidationError(
                "post_vision_len: trace has no post-vision rows and no fallback_window was set"
            )
        return QueryWindow(m - min(policy.fallback_window, m), m)
    raise ValidationError(f"policy: {policy!r} does not score by attention window")


def policy_from_name(
    name: str,
    *,
    sliding_window: int | None = None,
    fallback_window: int | None = None,
    budget_k: int | None = None,
) -> ScoringPolicy:
    """Build a policy from its CLI name: vlcache, h2o, sliding, streaming."""
    if name == "vlcache":
        return PostVision(fallback_window=fallback_window)
    if name == "h2o":
        return AccumulatedAttention()
    if name == "sliding":
        if sliding_window is None:
            raise ValidationError("sliding_window: required for the sliding policy")
        return SlidingWindow(window_rows=sliding_window)
    if name == "streaming":
        if budget_k is None:
            return StreamingForBudget()
        return StreamingInitRecent.for_budget(budget_k)
    raise ValidationError(f"policy: unknown name {name!r}")


def head_scores(
    trace: AttentionTrace,
    layer: int,
    query_head: int,
    policy: ScoringPolicy,
    config: ScoringConfig = ScoringConfig(),
) -> np.ndarray:
    """Score per prompt token from a single query head, float64 [m]."""
    m = trace.header.prompt_len
    if isinstance(policy, StreamingForBudget):
        raise ValidationError(
            "policy: StreamingForBudget needs a kept count; resolve(k) it first"
        )
    if isinstance(policy, StreamingInitRecent):
        scores = np.zeros(m, dtype=np.float64)
        scores[m - min(policy.n_recent, m):] = 1.0
        scores[: min(policy.n_init, m)] = 2.0
        return scores
    window = policy_window(policy, trace.header)
    st = streaming_stats(trace, layer, query_head, window, p=config.p, tile=config.tile)
    return st.col_score[:m].copy()


def score_tokens(
    trace: AttentionTrace,
    layer: int,
    kv_head: int,
    policy: ScoringPolicy,
    config: ScoringConfig = ScoringConfig(),
) -> np.ndarray:
    """Score per prompt token for one KV head: group mean over query heads."""
    h = trace.header
    if not 0 <= kv_head < h.num_kv_heads:
        raise ValidationError(f"kv_head: must be in [0, {h.num_kv_heads}), got {kv_head}")
    group = h.group_size
    heads = range(kv_head * group, (kv_head + 1) * group)
    acc = np.zeros(h.prompt_len, dtype=np.float64)
    for q_h in heads:
        acc += head_scores(trace, layer, q_h, policy, config)
    return acc / group


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties toward the larger index; sorted."""
    scores = np.asarray(scores)
    if not 1 <= k <= scores.size:
        raise ValidationError(f"k: must be in [1, {scores.size}], got {k}")
    order = np.lexsort((np.arange(scores.size), scores))[::-1]
    return np.sort(order[:k])


def evict(
    scores: np.ndarray, kept_count: int, config: EvictionConfig = EvictionConfig()
) -> np.ndarray:
    """Kept prompt indices for one (layer, KV head), sorted ascending.

    The last ceil(recent_window_frac * kept_count) positions are reserved
    regardless of score; the remaining slots take the highest-scoring
    older tokens.
    """
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.size
    if not 1 <= kept_count <= m:
        raise ValidationError(f"kept_count: must be in [1, {m}], got {kept_count}")
    reserve = math.ceil(config.recent_window_frac * kept_count)
    reserve = min(reserve, kept_count)
    recent = np.arange(m - reserve, m)
    by_score = kept_count - reserve
    if by_score > 0:
        scored = top_k_indices(scores[: m - reserve], by_score)
        kept = np.concatenate([scored, recent])
    else:
        kept = recent
    return np.sort(kept).astype(np.int64)


@dataclass(frozen=True)
class KeptSet:
    """Kept indices for one (layer, KV head) plus the compaction map.

    compaction[old_index] is the post-compaction position, -1 if evicted.
    """

    layer: int
    kv_head: int
    kept: np.ndarray
    compaction: np.ndarray

    @classmethod
    def build(cls, layer: int, kv_head: int, kept: np.ndarray, prompt_len: int) -> "KeptSet":
        compaction = np.full(prompt_len, -1, dtype=np.int64)
        compaction[kept] = np.arange(kept.size)
        return cls(layer=layer, kv_head=kv_head, kept=kept, compaction=compaction)


@dataclass(frozen=True)
class CompressionResult:
    policy: ScoringPolicy
    allocation: BudgetAllocation
    kept_sets: list

    def kept_for(self, layer: int, kv_head: int) -> KeptSet:
        return self.kept_sets[layer][kv_head]

    @property
    def total_retained(self) -> int:
        return sum(ks.kept.size for row in self.kept_sets for ks in row)

    def to_summary(self) -> dict:
        return {
            "policy": repr(self.policy),
            "alpha": self.allocation.alpha,
            "requested_total": self.allocation.requested_total,
            "realized_total": self.allocation.realized_total,
            "total_retained": self.total_retained,
            "layers": [
                {
                    "layer": l,
                    "kept_count": int(self.allocation.kept_counts[l]),
                    "kv_heads": [
                        {"kv_head": ks.kv_head, "kept": ks.kept.tolist()}
                        for ks in self.kept_sets[l]
                    ],
                }
                for l in range(len(self.kept_sets))
            ],
        }


def compress_cache(
    trace: AttentionTrace,
    allocation: BudgetAllocation,
    policy: ScoringPolicy,
    eviction: EvictionConfig = EvictionConfig(),
    config: ScoringConfig = ScoringConfig(),
) -> CompressionResult:
    """Per-layer, per-KV-head kept sets under a budget allocation."""
    h = trace.header
    if allocation.prompt_len != h.prompt_len:
        raise ValidationError(
            f"allocation: prompt_len {allocation.prompt_len} does not match trace {h.prompt_len}"
        )
    if len(allocation.kept_counts) != h.num_layers:
        raise ValidationError(
            f"allocation: {len(allocation.kept_counts)} layers, trace has {h.num_layers}"
        )
    kept_sets = []
    for l in range(h.num_layers):
        kept_count = int(allocation.kept_counts[l])
        layer_policy = (
            policy.resolve(kept_count) if isinstance(policy, StreamingForBudget) else policy
        )
        row = []
        for kv in range(h.num_kv_heads):
            scores = score_tokens(trace, l, kv, layer_policy, config)
            kept = evict(scores, kept_count, eviction)
            row.append(KeptSet.build(l, kv, kept, h.prompt_len))
        kept_sets.append(row)
    return CompressionResult(policy=policy, allocation=allocation, kept_sets=kept_sets)

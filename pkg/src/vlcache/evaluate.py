"""Policy quality metrics: decoding-oracle hit rate, modality contribution
and coverage.

The oracle for a prompt of length m is the softmax attention the first
decoding row pays to the m prompt keys; a policy is judged by how much of
the oracle's top-k it retains. Contribution measures where the filtered
attention mass of decoding rows lands (vision vs language columns);
coverage measures where their top-k positions land. Both consider prompt
columns only, since compression applies to the prompt cache.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import DEFAULT_P, QueryWindow, dense_attention_rows
from .errors import ValidationError
from .scoring import ScoringConfig, ScoringPolicy, head_scores, top_k_indices
from .sparsity import threshold_filter
from .trace import AttentionTrace, TraceHeader

MODALITIES = ("vision", "language")


@dataclass(frozen=True)
class EvalWindow:
    """Decoding rows [first_decode_index, seq_len) plus coverage's budget.

    Coverage selects k = floor(alpha_eval * seq_len) positions per row.
    """

    first_decode_index: int
    seq_len: int
    alpha_eval: float = 0.1

    def __post_init__(self) -> None:
        if not 0 <= self.first_decode_index < self.seq_len:
            raise ValidationError(
                f"first_decode_index: must be in [0, {self.seq_len}), "
                f"got {self.first_decode_index}"
            )
        if not 0.0 < self.alpha_eval < 1.0:
            raise ValidationError(
                f"alpha_eval: must be in (0, 1), got {self.alpha_eval}"
            )

    @classmethod
    def for_header(
        cls, header: TraceHeader, alpha_eval: float = 0.1, first_decode_index: int | None = None
    ) -> "EvalWindow":
        t = header.prompt_len if first_decode_index is None else first_decode_index
        return cls(first_decode_index=t, seq_len=header.seq_len, alpha_eval=alpha_eval)

    @property
    def num_rows(self) -> int:
        return self.seq_len - self.first_decode_index

    @property
    def top_k(self) -> int:
        return math.floor(self.alpha_eval * self.seq_len)


def _check_eval_window(window: EvalWindow, header: TraceHeader) -> None:
    if window.seq_len != header.seq_len:
        raise ValidationError(
            f"seq_len: window says {window.seq_len}, trace has {header.seq_len}"
        )
    if window.first_decode_index < header.prompt_len:
        raise ValidationError(
            f"first_decode_index: must be >= prompt_len {header.prompt_len}, "
            f"got {window.first_decode_index}"
        )


def oracle_scores(
    trace: AttentionTrace, layer: int, head: int, decode_offset: int = 0
) -> np.ndarray:
    """Softmax weights of decoding row (m + decode_offset) over prompt keys.

    Float64 [m]. Restricting the softmax to the m prompt keys leaves the
    ranking of prompt columns unchanged relative to the full causal row.
    """
    h = trace.header
    if h.decode_len < 1:
        raise ValidationError("decode_len: trace has no decoding rows")
    if not 0 <= decode_offset < h.decode_len:
        raise ValidationError(
            f"decode_offset: must be in [0, {h.decode_len}), got {decode_offset}"
        )
    if not 0 <= layer < h.num_layers:
        raise ValidationError(f"layer: must be in [0, {h.num_layers}), got {layer}")
    if not 0 <= head < h.num_query_heads:
        raise ValidationError(f"head: must be in [0, {h.num_query_heads}), got {head}")
    m = h.prompt_len
    q = trace.queries[layer][head, m + decode_offset].astype(np.float64)
    keys = trace.keys[layer][trace.kv_head_for(head), :m].astype(np.float64)
    inv = 1.0 / np.sqrt(h.head_dim)
    logits = (keys @ q * inv).astype(np.float32)
    e = np.exp(logits - logits.max())
    e64 = e.astype(np.float64)
    return e64 / e64.sum()


def cache_hit_rate(
    trace: AttentionTrace,
    layer: int,
    head: int,
    policy: ScoringPolicy | np.ndarray,
    k: int,
    oracle_k: int | None = None,
    num_decode_rows: int = 1,
    config: ScoringConfig = ScoringConfig(),
) -> float:
    """|policy top-k ∩ oracle top-oracle_k| / oracle_k.

    The oracle set comes from the first decoding row; num_decode_rows > 1
    averages the rate over that many leading decoding rows instead. Both
    sides rank with the same tie-break (ties toward the larger index).
    policy may also be a precomputed per-token score vector of length m,
    e.g. oracle_scores itself to sanity-check the metric.
    """
    h = trace.header
    m = h.prompt_len
    if not 1 <= k <= m:
        raise ValidationError(f"k: must be in [1, {m}], got {k}")
    if oracle_k is None:
        oracle_k = k
    if not 1 <= oracle_k <= m:
        raise ValidationError(f"oracle_k: must be in [1, {m}], got {oracle_k}")
    if not 1 <= num_decode_rows <= max(h.decode_len, 1):
        raise ValidationError(
            f"num_decode_rows: must be in [1, {h.decode_len}], got {num_decode_rows}"
        )
    if isinstance(policy, np.ndarray):
        if policy.shape != (m,):
            raise ValidationError(
                f"policy: score vector must have shape ({m},), got {policy.shape}"
            )
        scores = policy.astype(np.float64, copy=False)
    else:
        scores = head_scores(trace, layer, head, policy, config)
    kept = set(top_k_indices(scores, k).tolist())
    total = 0.0
    for offset in range(num_decode_rows):
        oracle = set(top_k_indices(oracle_scores(trace, layer, head, offset), oracle_k).tolist())
        total += len(kept & oracle) / oracle_k
    return total / num_decode_rows


def _decode_rows_dense(
    trace: AttentionTrace, layer: int, head: int, window: EvalWindow
) -> np.ndarray:
    _check_eval_window(window, trace.header)
    qw = QueryWindow(window.first_decode_index, window.seq_len)
    return dense_attention_rows(trace, layer, head, qw)


def contribution(
    trace: AttentionTrace,
    layer: int,
    head: int,
    window: EvalWindow,
    modality: str,
    p: float = DEFAULT_P,
) -> float:
    """Share of filtered decoding-row attention mass landing on a modality.

    Per decoding row: threshold-filter the full causal row, then divide
    the surviving mass on the modality's prompt columns by the surviving
    mass on all prompt columns. Rows whose prompt mass is entirely
    filtered out count as 0. Empty modality ranges give 0.
    """
    idx = trace.layout.indices(modality)
    if idx.size == 0:
        return 0.0
    rows = _decode_rows_dense(trace, layer, head, window)
    filtered = threshold_filter(rows, p)
    m = trace.header.prompt_len
    num = filtered[:, idx].sum(axis=1)
    den = filtered[:, :m].sum(axis=1)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(ratio.mean())


def coverage(
    trace: AttentionTrace, layer: int, head: int, window: EvalWindow, modality: str
) -> float:
    """Share of per-row top-k prompt positions landing on a modality.

    k = floor(alpha_eval * seq_len); each decoding row's k highest prompt
    attention weights are selected with the global tie-break.
    """
    m = trace.header.prompt_len
    k = window.top_k
    if k < 1:
        raise ValidationError(
            f"alpha_eval: floor({window.alpha_eval} * {window.seq_len}) selects 0 positions"
        )
    if k > m:
        raise ValidationError(f"alpha_eval: top-k {k} exceeds prompt_len {m}")
    idx = trace.layout.indices(modality)
    mod_mask = np.zeros(m, dtype=bool)
    mod_mask[idx] = True
    rows = _decode_rows_dense(trace, layer, head, window)
    fractions = np.empty(rows.shape[0], dtype=np.float64)
    for i in range(rows.shape[0]):
        sel = top_k_indices(rows[i, :m], k)
        fractions[i] = mod_mask[sel].mean()
    return float(fractions.mean())


@dataclass
class EvalReport:
    """Flat metric rows ready for CSV or JSON serialization."""

    hit_rate_rows: list = field(default_factory=list)
    modality_rows: list = field(default_factory=list)
    curve_stats: dict = field(default_factory=dict)

    HIT_RATE_FIELDS = ("layer", "head", "policy", "k", "hit_rate")
    MODALITY_FIELDS = ("layer", "modality", "contribution", "coverage")

    def to_dict(self) -> dict:
        return {
            "hit_rates": self.hit_rate_rows,
            "modality": self.modality_rows,
            "curve_stats": self.curve_stats,
        }


def build_report(
    trace: AttentionTrace,
    policies: dict,
    k: int,
    window: EvalWindow | None = None,
    p: float = DEFAULT_P,
    config: ScoringConfig = ScoringConfig(),
) -> EvalReport:
    """Hit rates for each named policy on every (layer, head), plus
    per-layer modality contribution/coverage averaged over query heads."""
    h = trace.header
    if window is None:
        window = EvalWindow.for_header(h)
    report = EvalReport()
    for layer in range(h.num_layers):
        for head in range(h.num_query_heads):
            for name, policy in policies.items():
                rate = cache_hit_rate(trace, layer, head, policy, k, config=config)
                report.hit_rate_rows.append(
                    {"layer": layer, "head": head, "policy": name, "k": k, "hit_rate": rate}
                )
    for layer in range(h.num_layers):
        for modality in MODALITIES:
            contrib = np.mean(
                [
                    contribution(trace, layer, head, window, modality, p)
                    for head in range(h.num_query_heads)
                ]
            )
            cover = np.mean(
                [
                    coverage(trace, layer, head, window, modality)
                    for head in range(h.num_query_heads)
                ]
            )
            report.modality_rows.append(
                {
                    "layer": layer,
                    "modality": modality,
                    "contribution": float(contrib),
                    "coverage": float(cover),
                }
            )
    return report

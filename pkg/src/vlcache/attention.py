"""Dense reference attention and tiled streaming statistics.

Numerics contract shared by every path in this module: logits are float32
values obtained from float64 dot products scaled by 1/sqrt(d), softmax
subtracts the per-row float32 maximum, exponentials are evaluated in
float32, and all accumulation (denominators, column scores) is float64.
dense_attention_rows materializes the attention rows and is the oracle;
streaming_stats produces the same statistics tile by tile without ever
holding a [window, keys] matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ValidationError
from .trace import AttentionTrace

DEFAULT_P = 0.01
DEFAULT_TILE = 128


@dataclass(frozen=True)
class QueryWindow:
    """Half-open absolute query-row range [start, end) within [0, m + n_dec)."""

    start: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.start < self.end):
            raise ValidationError(f"window: need 0 <= start < end, got [{self.start}, {self.end})")

    @property
    def num_rows(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class AttentionStats:
    """Per-row and per-column attention statistics for one query window.

    row_max / row_sum are the softmax max and denominator per window row.
    col_score[j] is the post-softmax attention mass key j received, summed
    over the window rows. below_threshold_count[j] counts causal entries
    of column j strictly below p times the row maximum after softmax;
    causal_entry_count[j] counts all causal entries of that column.
    """

    window: QueryWindow
    p: float
    row_max: np.ndarray
    row_sum: np.ndarray
    col_score: np.ndarray
    below_threshold_count: np.ndarray
    causal_entry_count: np.ndarray


def _check_window(trace: AttentionTrace, layer: int, head: int, window: QueryWindow) -> None:
    h = trace.header
    if not 0 <= layer < h.num_layers:
        raise ValidationError(f"layer: must be in [0, {h.num_layers}), got {layer}")
    if not 0 <= head < h.num_query_heads:
        raise ValidationError(f"head: must be in [0, {h.num_query_heads}), got {head}")
    if window.end > h.seq_len:
        raise ValidationError(f"window: end {window.end} exceeds seq_len {h.seq_len}")


def dense_attention_rows(
    trace: AttentionTrace, layer: int, head: int, window: QueryWindow
) -> np.ndarray:
    """Causal softmax rows for one head: float64 [window rows, window.end].

    Row r holds the attention of absolute query window.start + r over keys
    0..window.start + r; entries beyond the causal frontier are exactly 0.
    """
    _check_window(trace, layer, head, window)
    q = trace.query_rows(layer, head, window.start, window.end).astype(np.float64)
    k = trace.key_rows(layer, head, window.end).astype(np.float64)
    inv = 1.0 / np.sqrt(float(q.shape[1]))
    logits = (q @ k.T * inv).astype(np.float32)
    frontier = window.start + np.arange(window.num_rows)
    mask = np.arange(window.end)[None, :] <= frontier[:, None]
    logits = np.where(mask, logits, np.float32(-np.inf))
    e = np.exp(logits - logits.max(axis=1, keepdims=True)).astype(np.float64)
    e[~mask] = 0.0
    return e / e.sum(axis=1, keepdims=True)


def streaming_stats(
    trace: AttentionTrace,
    layer: int,
    head: int,
    window: QueryWindow,
    p: float = DEFAULT_P,
    tile: int = DEFAULT_TILE,
) -> AttentionStats:
    """Attention statistics for one head's query window, computed in tiles.

    Peak working memory is O(tile^2 + window.end) regardless of the window
    size; results match the statistics derived from dense_attention_rows.

    Args:
        trace: source trace.
        layer: layer index.
        head: query head index (keys come from its KV head).
        window: absolute query-row range.
        p: threshold fraction for the below-threshold counts, in (0, 1).
        tile: tile edge, >= 1.
    """
    _check_window(trace, layer, head, window)
    if not 0.0 < p < 1.0:
        raise ValidationError(f"p: must be in (0, 1), got {p}")
    if tile < 1:
        raise ValidationError(f"tile: must be >= 1, got {tile}")
    q = trace.query_rows(layer, head, window.start, window.end)
    k = trace.key_rows(layer, head, window.end)
    row_max, row_sum, col_score, below, causal = _kernels.stats_tiled(
        q, k, window.start, float(p), int(tile)
    )
    return AttentionStats(
        window=window,
        p=p,
        row_max=row_max,
        row_sum=row_sum,
        col_score=col_score,
        below_threshold_count=below,
        causal_entry_count=causal,
    )

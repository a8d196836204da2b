"""Threshold filtering and per-layer attention sparsity metrics.

Sparsity of a window of attention rows is the fraction of causal entries
that fall strictly below p times their row's post-softmax maximum. The
prefill phase uses all m prompt rows (normalizer m(m+1)/2), the
post-vision phase the last tau prompt rows, and the decoding phase the
n_dec generated rows, each against every causally visible key.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import DEFAULT_P, DEFAULT_TILE, QueryWindow, streaming_stats
from .errors import ValidationError, ZeroVarianceError
from .trace import AttentionTrace


@dataclass(frozen=True)
class SparsityConfig:
    p: float = DEFAULT_P
    tile: int = DEFAULT_TILE

    def __post_init__(self) -> None:
        if not 0.0 < self.p < 1.0:
            raise ValidationError(f"p: must be in (0, 1), got {self.p}")
        if self.tile < 1:
            raise ValidationError(f"tile: must be >= 1, got {self.tile}")


@dataclass(frozen=True)
class LayerSparsity:
    """gamma[l, h] = sparsity of layer l, query head h, for one phase."""

    phase: str
    p: float
    gamma: np.ndarray

    def layer_means(self) -> np.ndarray:
        """Head-mean sparsity per layer (the gamma' of budget allocation)."""
        return self.gamma.mean(axis=1)


def threshold_filter(a: np.ndarray, p: float) -> np.ndarray:
    """Zero every entry strictly below p times its row maximum.

    Accepts a single row or a matrix of rows; returns a filtered copy.
    Idempotent: surviving entries keep the row maximum intact.
    """
    if not 0.0 < p < 1.0:
        raise ValidationError(f"p: must be in (0, 1), got {p}")
    arr = np.asarray(a)
    if arr.size == 0:
        raise ValidationError("input: must be non-empty")
    if not np.isfinite(arr).all():
        raise ValidationError("input: must be finite")
    if (arr < 0).any():
        raise ValidationError("input: must be non-negative")
    rows = arr if arr.ndim == 2 else arr[None, :]
    if arr.ndim > 2:
        raise ValidationError(f"input: must be 1-D or 2-D, got {arr.ndim}-D")
    cut = p * rows.max(axis=1, keepdims=True)
    out = np.where(rows < cut, 0.0, rows)
    return out if arr.ndim == 2 else out[0]


def window_sparsity(
    trace: AttentionTrace, config: SparsityConfig, start: int, end: int, phase: str = "window"
) -> LayerSparsity:
    """Sparsity over query rows [start, end) for every (layer, head)."""
    h = trace.header
    gamma = np.empty((h.num_layers, h.num_query_heads))
    window = QueryWindow(start, end)
    for l in range(h.num_layers):
        for q_h in range(h.num_query_heads):
            st = streaming_stats(trace, l, q_h, window, p=config.p, tile=config.tile)
            gamma[l, q_h] = st.below_threshold_count.sum() / st.causal_entry_count.sum()
    return LayerSparsity(phase=phase, p=config.p, gamma=gamma)


def prefill_sparsity(trace: AttentionTrace, config: SparsityConfig = SparsityConfig()) -> LayerSparsity:
    """Sparsity over all m prompt rows."""
    return window_sparsity(trace, config, 0, trace.header.prompt_len, phase="prefill")


def post_vision_sparsity(trace: AttentionTrace, config: SparsityConfig = SparsityConfig()) -> LayerSparsity:
    """Sparsity over the last tau prompt rows; requires tau >= 1."""
    h = trace.header
    if h.post_vision_len < 1:
        raise ValidationError("post_vision_len: trace has no post-vision rows")
    return window_sparsity(
        trace, config, h.prompt_len - h.post_vision_len, h.prompt_len, phase="post_vision"
    )


def decoding_sparsity(trace: AttentionTrace, config: SparsityConfig = SparsityConfig()) -> LayerSparsity:
    """Sparsity over the n_dec decoding rows; requires n_dec >= 1."""
    h = trace.header
    if h.decode_len < 1:
        raise ValidationError("decode_len: trace has no decoding rows")
    return window_sparsity(trace, config, h.prompt_len, h.seq_len, phase="decoding")


def curve_similarity(a: LayerSparsity, b: LayerSparsity) -> float:
    """Pearson correlation between two per-layer sparsity curves.

    Curves are the head-mean gamma per layer. Raises ZeroVarianceError
    when either curve is constant (correlation undefined).
    """
    xs = a.layer_means()
    ys = b.layer_means()
    if xs.shape != ys.shape:
        raise ValidationError(f"curves: layer counts differ ({xs.size} vs {ys.size})")
    if xs.size < 2:
        raise ValidationError("curves: need at least 2 layers")
    xd = xs - xs.mean()
    yd = ys - ys.mean()
    vx = float(xd @ xd)
    vy = float(yd @ yd)
    if vx == 0.0 or vy == 0.0:
        raise ZeroVarianceError("curve variance is zero; correlation undefined")
    return float(xd @ yd) / np.sqrt(vx * vy)

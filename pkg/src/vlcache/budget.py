"""Per-layer cache budget allocation.

The sparsity-aware split turns head-mean post-vision sparsity gamma' into
layer budgets beta = clip((1 - gamma') / Z * alpha * L, beta_min, beta_max)
with Z = sum(1 - gamma'). Budgets are not renormalized after clipping;
the allocation reports the realized total next to the requested alpha * L.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSparsityError, ValidationError
from .sparsity import SparsityConfig, post_vision_sparsity, window_sparsity
from .trace import AttentionTrace


@dataclass(frozen=True)
class BudgetConfig:
    alpha: float = 0.1
    beta_min: float = 0.01
    beta_max: float = 1.0
    tau_fallback_window: int = 50

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValidationError(f"alpha: must be in (0, 1], got {self.alpha}")
        if not 0.0 < self.beta_min <= self.beta_max:
            raise ValidationError("beta_min: need 0 < beta_min <= beta_max")
        if self.tau_fallback_window < 1:
            raise ValidationError("tau_fallback_window: must be >= 1")


@dataclass(frozen=True)
class BudgetAllocation:
    """Per-layer budget fractions and kept token counts."""

    alpha: float
    prompt_len: int
    gamma_mean: np.ndarray
    beta_preclip: np.ndarray
    beta: np.ndarray
    kept_counts: np.ndarray

    @property
    def requested_total(self) -> float:
        return self.alpha * len(self.beta)

    @property
    def realized_total(self) -> float:
        return float(self.beta.sum())

    def to_rows(self) -> list[dict]:
        return [
            {
                "layer": l,
                "gamma_mean": None if math.isnan(self.gamma_mean[l]) else float(self.gamma_mean[l]),
                "beta_preclip": float(self.beta_preclip[l]),
                "beta": float(self.beta[l]),
                "kept_count": int(self.kept_counts[l]),
            }
            for l in range(len(self.beta))
        ]


def _kept_counts(beta: np.ndarray, prompt_len: int) -> np.ndarray:
    kept = np.ceil(beta * prompt_len).astype(np.int64)
    return np.clip(kept, 1, prompt_len)


def _finish(alpha, prompt_len, gamma_mean, pre, config) -> BudgetAllocation:
    beta = np.clip(pre, config.beta_min, config.beta_max)
    return BudgetAllocation(
        alpha=alpha,
        prompt_len=prompt_len,
        gamma_mean=np.asarray(gamma_mean, dtype=np.float64),
        beta_preclip=pre,
        beta=beta,
        kept_counts=_kept_counts(beta, prompt_len),
    )


def allocate_sparsity_aware(
    gamma_mean: np.ndarray,
    alpha: float,
    prompt_len: int,
    config: BudgetConfig | None = None,
) -> BudgetAllocation:
    """Skewed budgets from per-layer head-mean sparsity.

    Pre-clip budgets sum to alpha * L exactly; each is proportional to the
    layer's density 1 - gamma'. All layers fully sparse (Z = 0) is an error.
    """
    cfg = config or BudgetConfig(alpha=alpha)
    if not 0.0 < alpha <= 1.0:
        raise ValidationError(f"alpha: must be in (0, 1], got {alpha}")
    g = np.asarray(gamma_mean, dtype=np.float64)
    if g.ndim != 1 or g.size < 1:
        raise ValidationError("gamma_mean: must be a non-empty 1-D array")
    if (g < 0).any() or (g > 1).any():
        raise ValidationError("gamma_mean: entries must be in [0, 1]")
    if prompt_len < 1:
        raise ValidationError(f"prompt_len: must be >= 1, got {prompt_len}")
    z = float((1.0 - g).sum())
    if z == 0.0:
        raise DegenerateSparsityError("every layer is fully sparse; cannot split the budget")
    pre = (1.0 - g) / z * (alpha * g.size)
    return _finish(alpha, prompt_len, g, pre, cfg)


def allocate_uniform(
    alpha: float, num_layers: int, prompt_len: int, config: BudgetConfig | None = None
) -> BudgetAllocation:
    """Equal budget alpha for every layer."""
    if num_layers < 1:
        raise ValidationError(f"num_layers: must be >= 1, got {num_layers}")
    cfg = config or BudgetConfig(alpha=alpha)
    pre = np.full(num_layers, alpha, dtype=np.float64)
    return _finish(alpha, prompt_len, np.full(num_layers, np.nan), pre, cfg)


def allocate_pyramid(
    alpha: float,
    num_layers: int,
    prompt_len: int,
    decay_ratio: float = 0.5,
    config: BudgetConfig | None = None,
) -> BudgetAllocation:
    """Linearly decaying budgets from alpha*(2 - decay_ratio) down to alpha*decay_ratio.

    The mean budget stays alpha pre-clip; decay_ratio 1 recovers uniform.
    """
    if num_layers < 1:
        raise ValidationError(f"num_layers: must be >= 1, got {num_layers}")
    if not 0.0 < decay_ratio <= 1.0:
        raise ValidationError(f"decay_ratio: must be in (0, 1], got {decay_ratio}")
    cfg = config or BudgetConfig(alpha=alpha)
    top = alpha * (2.0 - decay_ratio)
    bot = alpha * decay_ratio
    if num_layers == 1:
        pre = np.array([alpha], dtype=np.float64)
    else:
        pre = np.linspace(top, bot, num_layers)
    return _finish(alpha, prompt_len, np.full(num_layers, np.nan), pre, cfg)


def measure_gamma_mean(
    trace: AttentionTrace,
    sparsity_config: SparsityConfig = SparsityConfig(),
    budget_config: BudgetConfig = BudgetConfig(),
    window_rows: int | None = None,
) -> np.ndarray:
    """Head-mean sparsity per layer for budget allocation.

    Uses the post-vision rows when the trace has them; a trace with tau = 0
    falls back to the last min(m, tau_fallback_window) prompt rows.
    window_rows overrides the row count explicitly.
    """
    h = trace.header
    if window_rows is not None:
        if window_rows < 1:
            raise ValidationError(f"window_rows: must be >= 1, got {window_rows}")
        rows = min(window_rows, h.prompt_len)
    elif h.post_vision_len >= 1:
        return post_vision_sparsity(trace, sparsity_config).layer_means()
    else:
        rows = min(budget_config.tau_fallback_window, h.prompt_len)
    sp = window_sparsity(
        trace, sparsity_config, h.prompt_len - rows, h.prompt_len, phase="budget_window"
    )
    return sp.layer_means()

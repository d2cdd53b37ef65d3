"""Visual-column score boost on the newest query row, armed per layer band."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ConfigError, ShapeError

STATISTICS = ("mean_abs", "median_abs", "max_abs")


@dataclass(frozen=True)
class InterventionPlan:
    beta: object = 1            # 0/1, or a per-row array of 0/1 for batched forwards
    alpha: float = 0.5
    visual_indices: object = None   # slice or index array; None means "all visual slots"
    layer_band: Optional[tuple] = (4, 8)
    statistic: str = "mean_abs"

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"unknown statistic {self.statistic!r}; choose from {STATISTICS}")

    def layers(self) -> range:
        if self.layer_band is None:
            return range(0)
        lo, hi = self.layer_band
        return range(lo, hi + 1)


def _head_statistic(abs_scores: np.ndarray, statistic: str) -> np.ndarray:
    # abs_scores: (..., H, n) -> (..., 1, n)
    if statistic == "mean_abs":
        return np.mean(abs_scores, axis=-2, keepdims=True)
    if statistic == "median_abs":
        return np.median(abs_scores, axis=-2, keepdims=True)
    return np.max(abs_scores, axis=-2, keepdims=True)


def fci_boost(scores, plan: InterventionPlan) -> np.ndarray:
    """Return boosted copies of the per-head newest-row scores.

    ``scores`` is (H, n) or (B, H, n). Visual columns gain
    ``beta * alpha * stat_h |score_h|`` computed from the unmodified scores;
    every other column is returned untouched.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim not in (2, 3):
        raise ShapeError(f"expected (H, n) or (B, H, n) scores, got shape {s.shape}")
    out = s.copy()
    cols = plan.visual_indices if plan.visual_indices is not None else slice(None)
    vis = s[..., cols]
    with np.errstate(invalid="ignore"):
        stat = _head_statistic(np.abs(vis), plan.statistic)
    beta = np.asarray(plan.beta, dtype=np.float64)
    if beta.ndim == 1:
        if s.ndim != 3 or beta.shape[0] != s.shape[0]:
            raise ShapeError("per-row beta needs batched (B, H, n) scores with matching B")
        beta = beta[:, None, None]
    boost = beta * plan.alpha * stat
    if np.all(boost == 0):
        return out
    out[..., cols] = vis + boost
    return out


class FCIHook:
    """Score hook that applies :func:`fci_boost` on layers inside the band."""

    def __init__(self, plan: InterventionPlan, n_visual: int):
        self.plan = plan
        self.cols = plan.visual_indices if plan.visual_indices is not None else slice(0, n_visual)
        self._plan = InterventionPlan(plan.beta, plan.alpha, self.cols, plan.layer_band, plan.statistic)
        self.armed = frozenset(plan.layers())

    def __call__(self, layer: int, scores: np.ndarray) -> np.ndarray:
        if layer not in self.armed:
            return scores
        return fci_boost(scores, self._plan)


def apply_to_layers(plan: InterventionPlan, n_layers: int, n_visual: int) -> FCIHook:
    if plan.layer_band is not None:
        lo, hi = plan.layer_band
        if not (0 <= lo <= hi < n_layers):
            raise ConfigError(f"layer band {plan.layer_band} outside a {n_layers}-layer decoder")
    if plan.visual_indices is not None and not isinstance(plan.visual_indices, slice):
        idx = np.asarray(plan.visual_indices)
        if idx.size and (idx.min() < 0 or idx.max() >= n_visual):
            raise ConfigError("visual indices outside the visual span")
    return FCIHook(plan, n_visual)

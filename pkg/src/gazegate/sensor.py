"""Harsanyi interactions over masked modality conditions and the variance gate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, InsufficientCandidatesError, NumericDomainError


def harsanyi_interaction(logit_full, logit_v, logit_t, logit_none):
    """Joint vision-text contribution to a logit: full - V - T + none.

    Works elementwise on arrays as well as on scalars.
    """
    vals = [np.asarray(v, dtype=np.float64) for v in (logit_full, logit_v, logit_t, logit_none)]
    if not all(np.all(np.isfinite(v)) for v in vals):
        raise NumericDomainError("interaction inputs must be finite")
    full, v, t, none = vals
    out = full - v - t + none
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CandidateSet:
    tokens: np.ndarray
    logits: np.ndarray

    @property
    def k(self) -> int:
        return int(self.tokens.size)


def top_k(logits, k: int) -> CandidateSet:
    """Top-k by descending logit; ties go to the lower token index."""
    logits = np.asarray(logits, dtype=np.float64)
    if k < 2:
        raise InsufficientCandidatesError(f"k must be >= 2, got {k}")
    if k > logits.shape[-1]:
        raise InsufficientCandidatesError(f"k={k} exceeds vocabulary size {logits.shape[-1]}")
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    return CandidateSet(order, np.take_along_axis(logits, order, axis=-1))


@dataclass(frozen=True)
class InteractionRecord:
    step: int
    candidates: np.ndarray
    interactions: np.ndarray
    D: float
    kappa: float
    beta: int


def interaction_variance(interactions) -> np.ndarray:
    """Population variance over the last axis."""
    x = np.asarray(interactions, dtype=np.float64)
    if x.shape[-1] < 2:
        raise InsufficientCandidatesError("need at least 2 candidates")
    return np.mean((x - np.mean(x, axis=-1, keepdims=True)) ** 2, axis=-1)


def sense(candidates: CandidateSet, logits_full, logits_v, logits_t, logits_none,
          kappa: float, step: int = 0) -> InteractionRecord:
    if candidates.k < 2:
        raise InsufficientCandidatesError("need at least 2 candidates")
    idx = candidates.tokens
    inter = harsanyi_interaction(*(np.asarray(l)[idx] for l in (logits_full, logits_v, logits_t, logits_none)))
    D = float(interaction_variance(inter))
    return InteractionRecord(step, idx, inter, D, float(kappa), int(D > kappa))


def sense_batch(cand_tokens: np.ndarray, logits_full, logits_v, logits_t, logits_none, kappa: float):
    """Batched gate: arrays of shape (B, V), candidates (B, k). Returns (I, D, beta)."""
    take = lambda l: np.take_along_axis(np.asarray(l, dtype=np.float64), cand_tokens, axis=-1)
    inter = harsanyi_interaction(take(logits_full), take(logits_v), take(logits_t), take(logits_none))
    D = interaction_variance(inter)
    return inter, D, (D > kappa).astype(np.int64)


def sweep_kappa(D_trace, kappa_grid) -> np.ndarray:
    """Trigger rate (fraction of steps with D > kappa) for each kappa."""
    D = np.asarray(D_trace, dtype=np.float64)
    grid = np.asarray(kappa_grid, dtype=np.float64)
    if D.size == 0:
        raise ConfigError("empty D trace")
    if grid.size == 0:
        raise ConfigError("empty kappa grid")
    return np.mean(D[None, :] > grid[:, None], axis=1)

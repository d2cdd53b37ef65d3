"""Small float64 kernels shared by the decoder, the sensor and telemetry."""

from __future__ import annotations

import numpy as np

from .exceptions import InsufficientCandidatesError, NumericDomainError

KL_FLOOR = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for x of shape (..., S, d).

    Stacked matmul runs one small product per leading slice, so a row gives
    the same bits whether it is evaluated alone or inside a batch. A plain
    2-D gemm does not guarantee that.
    """
    if x.ndim == 2:
        return (x[:, None, :] @ w)[:, 0, :]
    return x @ w


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``; ``-inf`` entries get zero mass."""
    m = np.max(scores, axis=axis, keepdims=True)
    e = np.exp(scores - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_row(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise NumericDomainError("softmax_row expects a non-empty vector")
    if not np.all(np.isfinite(x)):
        raise NumericDomainError("softmax_row input must be finite")
    return softmax(x)


def variance(values) -> float:
    """Population variance (divides by k)."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise InsufficientCandidatesError(f"need at least 2 values, got {x.size}")
    return float(np.mean((x - np.mean(x)) ** 2))


def _check_distribution(p: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise NumericDomainError(f"{name} is not a probability vector")
    if abs(float(np.sum(p)) - 1.0) > 1e-6:
        raise NumericDomainError(f"{name} does not sum to 1")


def kl_divergence(p, q) -> float:
    """Natural-log KL(p || q)."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise NumericDomainError(f"length mismatch: {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    if np.any(q < KL_FLOOR):
        raise NumericDomainError("q has an entry below the positivity floor")
    mask = p > 0
    return float(max(np.sum(p[mask] * np.log(p[mask] / q[mask])), 0.0))


def kl_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise KL(rows[a] || rows[b]) for strictly positive rows, shape (..., H, H)."""
    logp = np.log(rows)
    # sum_j p_a[j] * (log p_a[j] - log p_b[j])
    self_term = np.sum(rows * logp, axis=-1)[..., :, None]
    cross = np.einsum("...aj,...bj->...ab", rows, logp)
    return np.maximum(self_term - cross, 0.0)


def nucleus_filter(probs: np.ndarray, top_p: float = 1.0, temperature: float = 1.0) -> np.ndarray:
    """Renormalized nucleus distribution (zeros outside the kept prefix)."""
    if not 0.0 < top_p <= 1.0:
        raise NumericDomainError(f"top_p must lie in (0, 1], got {top_p}")
    if not temperature > 0:
        raise NumericDomainError(f"temperature must be positive, got {temperature}")
    p = np.asarray(probs, dtype=np.float64)
    _check_distribution(p, "probs")
    if temperature != 1.0:
        with np.errstate(divide="ignore"):
            logits = np.log(p) / temperature
        p = softmax(logits)
    if top_p >= 1.0:
        return p / np.sum(p)
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    keep = min(int(np.searchsorted(cum, top_p, side="left")) + 1, p.size)
    out = np.zeros_like(p)
    out[order[:keep]] = p[order[:keep]]
    return out / np.sum(out)


def sample_categorical(probs, rng: np.random.Generator, top_p: float = 1.0, temperature: float = 1.0) -> int:
    p = nucleus_filter(probs, top_p, temperature)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    # never land on a zero-mass tail entry
    idx = min(idx, int(np.flatnonzero(p)[-1]))
    return idx

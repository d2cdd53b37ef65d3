"""Per-step traces and attention metrics (head divergence, visual mass, Distinct-2)."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import InsufficientHeadsError, ShapeError, UndefinedMetricError
from .numerics import kl_divergence

STEPS_SCHEMA = "gazegate.steps/v1"
STEPS_HEADER = ["step", "token", "class", "beta", "D", "hdi_pre", "hdi_post",
                "var_ratio_pre", "var_ratio_post", "fwd_count"]
TOKEN_CLASSES = ("content", "function", "other")


def fmt(x) -> str:
    """17 significant digits: float64 values survive a text round trip."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def hdi(rows) -> float:
    """Mean KL divergence over all ordered pairs of distinct heads."""
    P = np.asarray(rows, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise InsufficientHeadsError("need at least two heads")
    H = P.shape[0]
    total = sum(kl_divergence(P[a], P[b]) for a in range(H) for b in range(H) if a != b)
    return total / (H * (H - 1))


def hdi_batch(rows: np.ndarray) -> np.ndarray:
    """Vectorized :func:`hdi` over leading axes, rows shape (..., H, n)."""
    P = np.asarray(rows, dtype=np.float64)
    H = P.shape[-2]
    if H < 2:
        raise InsufficientHeadsError("need at least two heads")
    with np.errstate(divide="ignore"):
        logp = np.log(np.maximum(P, 1e-300))
    plogp = np.sum(np.where(P > 0, P * logp, 0.0), axis=-1)                 # (..., H)
    cross = np.einsum("...aj,...bj->...ab", P, logp)                       # sum_j P_a log P_b
    kl = np.maximum(plogp[..., :, None] - cross, 0.0)
    off = ~np.eye(H, dtype=bool)
    return np.sum(kl[..., off], axis=-1) / (H * (H - 1))


def visual_attention_ratio(row, visual_indices) -> float:
    p = np.asarray(row, dtype=np.float64)
    idx = np.asarray(visual_indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= p.shape[-1]):
        raise IndexError("visual index outside the attention row")
    return float(np.sum(p[..., idx], axis=-1))


def band_visual_ratio(attention: np.ndarray, n_visual: int, layers) -> np.ndarray:
    """Mean visual mass over heads and the given layers; attention (B, L, H, n)."""
    sel = attention[:, list(layers), :, :n_visual]
    return np.mean(np.sum(sel, axis=-1), axis=(1, 2))


def distinct2(tokens) -> float:
    seq = list(tokens)
    if len(seq) < 2:
        raise UndefinedMetricError("Distinct-2 needs at least two tokens")
    bigrams = list(zip(seq[:-1], seq[1:]))
    return len(set(bigrams)) / len(bigrams)


@dataclass
class StepTrace:
    step: int
    token: int
    token_class: str
    beta: int
    D: float
    hdi_pre: float
    hdi_post: float
    var_ratio_pre: float
    var_ratio_post: float
    fwd_count: int
    prev_token: int = -1
    prev_class: str = "other"
    entropy: float = float("nan")
    margin: float = float("nan")

    def csv_row(self) -> list:
        return [fmt(self.step), fmt(self.token), self.token_class, fmt(self.beta), fmt(self.D),
                fmt(self.hdi_pre), fmt(self.hdi_post), fmt(self.var_ratio_pre),
                fmt(self.var_ratio_post), fmt(self.fwd_count)]


@dataclass
class EpisodeReport:
    tokens: list
    traces: list
    total_forwards: int
    vision_encodes: int
    prefill_forwards: int = 0
    ground_truth: Optional[list] = None     # content tokens present in the image
    content_steps: int = 0
    hallucinations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.traces)

    @property
    def trigger_rate(self) -> float:
        return sum(t.beta for t in self.traces) / self.steps if self.traces else 0.0

    @property
    def distinct2(self) -> float:
        return distinct2(self.tokens) if len(self.tokens) >= 2 else float("nan")

    @property
    def hallucination_rate(self) -> float:
        return self.hallucinations / self.content_steps if self.content_steps else float("nan")

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "tokens": [int(t) for t in self.tokens],
            "trigger_rate": self.trigger_rate,
            "distinct2": self.distinct2,
            "total_forwards": int(self.total_forwards),
            "vision_encodes": int(self.vision_encodes),
            "prefill_forwards": int(self.prefill_forwards),
            "ground_truth": self.ground_truth,
            "content_steps": self.content_steps,
            "hallucinations": self.hallucinations,
        }


def trigger_stats(traces) -> dict:
    """Per token class: steps, triggers, trigger rate and mean interaction variance."""
    acc = defaultdict(lambda: {"steps": 0, "triggers": 0, "D_sum": 0.0})
    for t in traces:
        row = acc[t.token_class]
        row["steps"] += 1
        row["triggers"] += int(t.beta)
        row["D_sum"] += float(t.D)
    out = {}
    for cls in sorted(acc):
        row = acc[cls]
        out[cls] = {
            "steps": row["steps"],
            "triggers": row["triggers"],
            "rate": row["triggers"] / row["steps"],
            "mean_D": row["D_sum"] / row["steps"],
        }
    return out


def steps_csv_text(traces) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {STEPS_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEPS_HEADER)
    for t in traces:
        w.writerow(t.csv_row())
    return buf.getvalue()


def write_steps_csv(path, traces) -> None:
    Path(path).write_text(steps_csv_text(traces))


def read_steps_csv(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != f"# schema: {STEPS_SCHEMA}":
        raise ShapeError(f"{path}: missing or unknown schema line")
    rows = list(csv.DictReader(lines[1:]))
    if rows and list(rows[0].keys()) != STEPS_HEADER:
        raise ShapeError(f"{path}: unexpected header")
    return rows


def write_report(path, record: dict) -> None:
    text = json.dumps(_jsonable(record), indent=2, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        # fixed 17-digit text keeps reports byte-stable and lossless
        return float(fmt(obj))
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj

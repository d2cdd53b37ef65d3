"""A small decoder-only transformer with a vision-first KV cache.

Every array carries a leading batch axis so independent episodes (or masked
conditions, or beam hypotheses) can step in lockstep. Single-row calls and
batched calls produce identical bits per row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .exceptions import CapacityError, ConfigError, ShapeError
from .numerics import matmul, softmax

LN_EPS = 1e-5
WEIGHTS_MAGIC = b"CGVW"
WEIGHTS_VERSION = 1

# (layer, scores of the newest query row, shape (B, H, n)) -> modified scores
ScoreHook = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 12
    n_heads: int = 4
    d_model: int = 32
    vocab_size: int = 32
    n_visual_slots: int = 32
    max_seq: int = 64
    layer_band: tuple = (4, 8)
    pad_token: int = 0
    end_token: int = 2

    def __post_init__(self):
        object.__setattr__(self, "layer_band", tuple(int(b) for b in self.layer_band))
        if min(self.n_layers, self.n_heads, self.d_model, self.vocab_size, self.max_seq) < 1:
            raise ConfigError("sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_visual_slots < 1:
            raise ConfigError("need at least one visual slot")
        if self.n_visual_slots >= self.max_seq:
            raise ConfigError("max_seq must leave room for text after the visual slots")
        lo, hi = self.layer_band
        if not (0 <= lo <= hi <= self.n_layers - 1):
            raise ConfigError(f"layer_band {self.layer_band} outside [0, {self.n_layers - 1}]")
        if not (0 <= self.pad_token < self.vocab_size and 0 <= self.end_token < self.vocab_size):
            raise ConfigError("pad_token/end_token outside the vocabulary")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def header_fields(self) -> tuple:
        lo, hi = self.layer_band
        return (self.n_layers, self.n_heads, self.d_model, self.vocab_size, self.n_visual_slots,
                self.max_seq, lo, hi, self.pad_token, self.end_token)

    @classmethod
    def from_header_fields(cls, vals) -> "DecoderConfig":
        nl, nh, dm, vs, nv, ms, lo, hi, pad, end = vals
        return cls(nl, nh, dm, vs, nv, ms, (lo, hi), pad, end)


def _shapes(cfg: DecoderConfig) -> dict:
    L, d, V, f = cfg.n_layers, cfg.d_model, cfg.vocab_size, cfg.d_ff
    return {
        "tok_emb": (V, d), "vis_proj": (d, d),
        "ln1_g": (L, d), "ln1_b": (L, d),
        "wq": (L, d, d), "wk": (L, d, d), "wv": (L, d, d), "wo": (L, d, d),
        "ln2_g": (L, d), "ln2_b": (L, d),
        "w1": (L, d, f), "b1": (L, f), "w2": (L, f, d), "b2": (L, d),
        "drift": (L,),
        "lnf_g": (d,), "lnf_b": (d,), "w_u": (d, V),
    }


@dataclass
class DecoderWeights:
    """Parameters; field order is the on-disk order."""

    tok_emb: np.ndarray
    vis_proj: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    drift: np.ndarray
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    w_u: np.ndarray
    config: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        for name, shape in _shapes(self.config).items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            setattr(self, name, arr)

    @classmethod
    def zeros(cls, config: DecoderConfig) -> dict:
        """Mutable zero arrays (LayerNorm gains at one) for hand construction."""
        arrays = {k: np.zeros(s) for k, s in _shapes(config).items()}
        for g in ("ln1_g", "ln2_g", "lnf_g"):
            arrays[g][...] = 1.0
        return arrays

    @classmethod
    def random(cls, config: DecoderConfig, seed: int = 0, drift: float = 0.0) -> "DecoderWeights":
        rng = np.random.default_rng(seed)
        arrays = cls.zeros(config)
        for k in arrays:
            if k.startswith("ln") or k == "drift":
                continue
            arrays[k] = rng.uniform(-0.1, 0.1, size=arrays[k].shape)
        arrays["drift"][...] = drift
        return cls(**arrays, config=config)

    def array_names(self) -> list:
        return [f.name for f in fields(self) if f.name != "config"]

    def to_bytes(self) -> bytes:
        head = WEIGHTS_MAGIC + struct.pack("<I", WEIGHTS_VERSION)
        head += struct.pack("<10I", *self.config.header_fields())
        body = b"".join(getattr(self, n).astype("<f8").tobytes(order="C") for n in self.array_names())
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DecoderWeights":
        if blob[:4] != WEIGHTS_MAGIC:
            raise ShapeError("not a weights file (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != WEIGHTS_VERSION:
            raise ShapeError(f"unsupported weights version {version}")
        config = DecoderConfig.from_header_fields(struct.unpack_from("<10I", blob, 8))
        offset = 8 + 40
        arrays = {}
        for name, shape in _shapes(config).items():
            n = int(np.prod(shape))
            if offset + 8 * n > len(blob):
                raise ShapeError(f"weights file truncated at {name}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
            offset += 8 * n
        if offset != len(blob):
            raise ShapeError(f"{len(blob) - offset} trailing bytes in weights file")
        return cls(**arrays, config=config)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DecoderWeights":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class ModalityPartition:
    n_visual: int
    length: int

    @property
    def visual_indices(self) -> np.ndarray:
        return np.arange(self.n_visual)

    @property
    def text_indices(self) -> np.ndarray:
        return np.arange(self.n_visual, self.length)


class KvCache:
    """Append-only per-layer keys/values, shape (B, L, H, max_seq, d_head)."""

    def __init__(self, config: DecoderConfig, batch: int = 1, *, _arrays=None, length: int = 0):
        self.config = config
        if _arrays is None:
            shape = (batch, config.n_layers, config.n_heads, config.max_seq, config.d_head)
            _arrays = (np.zeros(shape), np.zeros(shape))
        self.k, self.v = _arrays
        self.length = length

    @property
    def batch(self) -> int:
        return self.k.shape[0]

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> None:
        """k_new/v_new: (B, L, H, S, d_head)."""
        S = k_new.shape[3]
        if k_new.shape[0] != self.batch:
            raise ShapeError(f"batch mismatch: {k_new.shape[0]} vs {self.batch}")
        if self.length + S > self.config.max_seq:
            raise CapacityError(f"cache full ({self.length} + {S} > {self.config.max_seq})")
        self.k[:, :, :, self.length:self.length + S] = k_new
        self.v[:, :, :, self.length:self.length + S] = v_new
        self.length += S

    def rows(self, sl: slice) -> "KvCache":
        """View on a contiguous block of rows (shares storage)."""
        return KvCache(self.config, _arrays=(self.k[sl], self.v[sl]), length=self.length)

    def take(self, idx) -> "KvCache":
        """Independent copy of the selected rows."""
        idx = np.asarray(idx, dtype=np.intp)
        return KvCache(self.config, _arrays=(self.k[idx], self.v[idx]), length=self.length)

    def put(self, idx, other: "KvCache") -> None:
        self.k[np.asarray(idx, dtype=np.intp)] = other.k
        self.v[np.asarray(idx, dtype=np.intp)] = other.v

    def copy(self) -> "KvCache":
        return KvCache(self.config, _arrays=(self.k.copy(), self.v.copy()), length=self.length)

    @classmethod
    def concat(cls, caches) -> "KvCache":
        caches = list(caches)
        lengths = {c.length for c in caches}
        if len(lengths) != 1:
            raise ShapeError(f"cannot stack caches of lengths {sorted(lengths)}")
        k = np.concatenate([c.k for c in caches])
        v = np.concatenate([c.v for c in caches])
        return cls(caches[0].config, _arrays=(k, v), length=lengths.pop())


@dataclass
class ForwardResult:
    logits: np.ndarray        # (B, V)
    attention: np.ndarray     # (B, L, H, n) newest query row, post-softmax
    pre_softmax: np.ndarray   # (B, L, H, n) same row, scaled + drift + hook
    hidden: np.ndarray        # (B, L, d) newest position after each block
    k_new: np.ndarray         # (B, L, H, S, d_head)
    v_new: np.ndarray

    def row(self, b: int) -> "ForwardResult":
        return ForwardResult(*(getattr(self, f.name)[b:b + 1] for f in fields(self)))


def layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g + b


def encode_vision(image_features, weights: DecoderWeights) -> np.ndarray:
    """Project raw slot features into the decoder's embedding space.

    Accepts (n_slots, d) or (B, n_slots, d). No bias term: zero features map
    to zero embeddings.
    """
    x = np.asarray(image_features, dtype=np.float64)
    cfg = weights.config
    if x.shape[-2:] != (cfg.n_visual_slots, cfg.d_model) or x.ndim not in (2, 3):
        raise ShapeError(f"expected (..., {cfg.n_visual_slots}, {cfg.d_model}) image features, got {x.shape}")
    return matmul(x, weights.vis_proj)


def embed_tokens(tokens, weights: DecoderWeights) -> np.ndarray:
    return weights.tok_emb[np.asarray(tokens, dtype=np.intp)]


def forward(weights: DecoderWeights, cache: KvCache, x: np.ndarray, *,
            hook: Optional[ScoreHook] = None, commit: bool = False) -> ForwardResult:
    """Run ``S`` new positions (x: (B, S, d)) over the cache with causal attention.

    Only the last new position is captured and only its query row is passed
    to ``hook``. Visual columns get the drift bias ``-drift[l] * t`` where
    ``t`` counts text positions before the query.
    """
    cfg = weights.config
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != cfg.d_model:
        raise ShapeError(f"expected (B, S, {cfg.d_model}) input, got {x.shape}")
    B, S, d = x.shape
    if B != cache.batch:
        raise ShapeError(f"input batch {B} != cache batch {cache.batch}")
    n0 = cache.length
    if n0 + S > cfg.max_seq:
        raise CapacityError(f"sequence would reach {n0 + S} > max_seq={cfg.max_seq}")
    H, dh, L, nv = cfg.n_heads, cfg.d_head, cfg.n_layers, cfg.n_visual_slots
    n = n0 + S
    scale = 1.0 / np.sqrt(dh)

    qpos = np.arange(n0, n)
    causal = np.where(np.arange(n)[None, :] <= qpos[:, None], 0.0, -np.inf)   # (S, n)
    t_text = np.maximum(qpos - nv, 0).astype(np.float64)                      # (S,)
    n_vis_cols = min(nv, n)

    attn_out = np.empty((B, L, H, n))
    pre_out = np.empty((B, L, H, n))
    hid_out = np.empty((B, L, d))
    k_out = np.empty((B, L, H, S, dh))
    v_out = np.empty((B, L, H, S, dh))

    h = x
    for l in range(L):
        a = layer_norm(h, weights.ln1_g[l], weights.ln1_b[l])
        q = matmul(a, weights.wq[l]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k = matmul(a, weights.wk[l]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        v = matmul(a, weights.wv[l]).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
        k_out[:, l] = k
        v_out[:, l] = v
        # stage the new keys/values past the committed length; slots beyond
        # ``cache.length`` hold no state, so an uncommitted pass changes nothing
        cache.k[:, l, :, n0:n] = k
        cache.v[:, l, :, n0:n] = v
        k_all, v_all = cache.k[:, l, :, :n], cache.v[:, l, :, :n]
        scores = (q @ k_all.transpose(0, 1, 3, 2)) * scale + causal               # (B, H, S, n)
        if weights.drift[l] != 0.0:
            scores[..., :n_vis_cols] -= (weights.drift[l] * t_text)[:, None]
        if hook is not None:
            scores[:, :, -1, :] = hook(l, scores[:, :, -1, :])
        p = softmax(scores)
        pre_out[:, l] = scores[:, :, -1, :]
        attn_out[:, l] = p[:, :, -1, :]
        ctx = (p @ v_all).transpose(0, 2, 1, 3).reshape(B, S, d)
        h = h + matmul(ctx, weights.wo[l])
        f = layer_norm(h, weights.ln2_g[l], weights.ln2_b[l])
        f = np.maximum(matmul(f, weights.w1[l]) + weights.b1[l], 0.0)
        h = h + matmul(f, weights.w2[l]) + weights.b2[l]
        hid_out[:, l] = h[:, -1]

    last = layer_norm(h[:, -1:], weights.lnf_g, weights.lnf_b)
    logits = matmul(last, weights.w_u)[:, 0]
    result = ForwardResult(logits, attn_out, pre_out, hid_out, k_out, v_out)
    if commit:
        cache.append(k_out, v_out)
    return result


def forward_step(weights: DecoderWeights, cache: KvCache, new_token_embedding, *,
                 hook: Optional[ScoreHook] = None, commit: bool = False) -> ForwardResult:
    """One incremental position. ``new_token_embedding`` is (d,) or (B, d)."""
    x = np.asarray(new_token_embedding, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    return forward(weights, cache, x[:, None, :], hook=hook, commit=commit)


class Decoder:
    """Convenience bundle of weights plus a vision-encode counter."""

    def __init__(self, weights: DecoderWeights):
        self.weights = weights
        self.config = weights.config
        self.vision_encodes = 0

    def encode_vision(self, image_features) -> np.ndarray:
        x = np.asarray(image_features)
        self.vision_encodes += 1 if x.ndim == 2 else x.shape[0]
        return encode_vision(x, self.weights)

    def new_cache(self, batch: int = 1) -> KvCache:
        return KvCache(self.config, batch)

    def partition(self, length: int) -> ModalityPartition:
        return ModalityPartition(self.config.n_visual_slots, length)

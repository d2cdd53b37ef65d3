"""Four masked decoder states kept in lockstep: FULL, V_ONLY, T_ONLY, NONE.

The FULL state lives in its own cache. The three auxiliary states share one
cache with row blocks ``[V_ONLY; T_ONLY; NONE]`` so a single batched forward
evaluates all three, and each block is still a private cache for its
condition.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decoder import DecoderWeights, ForwardResult, KvCache, embed_tokens, encode_vision, forward
from .exceptions import ConfigError, ShapeError


class Coalition(enum.IntEnum):
    FULL = 0
    V_ONLY = 1
    T_ONLY = 2
    NONE = 3


AUX_ORDER = (Coalition.V_ONLY, Coalition.T_ONLY, Coalition.NONE)


@dataclass
class CoalitionCaches:
    weights: DecoderWeights
    full: KvCache
    aux: Optional[KvCache]
    vision: np.ndarray                      # (E, n_visual, d) encoded once
    pending_text: np.ndarray                # (E,) newest, not yet committed token (FULL/T_ONLY stream)
    pad_system_prompt: bool = True
    vision_encodes: np.ndarray = None       # (E,)
    forwards: np.ndarray = None             # (E, 4) decode-time passes per condition
    prefill_forwards: int = 0
    _pending_full_kv: Optional[tuple] = field(default=None, repr=False)
    _pending_aux_kv: Optional[tuple] = field(default=None, repr=False)

    @property
    def n_episodes(self) -> int:
        return self.full.batch

    @property
    def committed_length(self) -> int:
        return self.full.length

    @property
    def seq_len(self) -> int:
        """Committed positions plus the pending newest token."""
        return self.full.length + 1

    def lengths(self) -> dict:
        if self.aux is None:
            return {Coalition.FULL: self.full.length}
        return {c: self.cache_for(c).length for c in Coalition}

    def cache_for(self, c: Coalition) -> KvCache:
        if c == Coalition.FULL:
            return self.full
        E = self.n_episodes
        i = AUX_ORDER.index(c)
        return self.aux.rows(slice(i * E, (i + 1) * E))

    def pending_tokens(self, c: Coalition) -> np.ndarray:
        if c in (Coalition.FULL, Coalition.T_ONLY):
            return self.pending_text
        return np.full(self.n_episodes, self.weights.config.pad_token)

    def aux_pending_embeddings(self) -> np.ndarray:
        toks = np.concatenate([self.pending_tokens(c) for c in AUX_ORDER])
        return embed_tokens(toks, self.weights)

    def take(self, idx) -> "CoalitionCaches":
        """Independent copy holding the selected episodes (rows)."""
        idx = np.asarray(idx, dtype=np.intp)
        E = self.n_episodes
        aux_idx = np.concatenate([idx + i * E for i in range(3)])
        out = CoalitionCaches(
            self.weights, self.full.take(idx),
            None if self.aux is None else self.aux.take(aux_idx), self.vision[idx].copy(),
            self.pending_text[idx].copy(), self.pad_system_prompt, self.vision_encodes[idx].copy(),
            self.forwards[idx].copy(), self.prefill_forwards)
        if self._pending_full_kv is not None:
            out._pending_full_kv = tuple(a[idx].copy() for a in self._pending_full_kv)
        if self._pending_aux_kv is not None:
            out._pending_aux_kv = tuple(a[aux_idx].copy() for a in self._pending_aux_kv)
        return out


def init_episodes(image_features, prompts, weights: DecoderWeights, *,
                  pad_system_prompt: bool = True, with_aux: bool = True) -> CoalitionCaches:
    """Seed all four conditions for a batch of episodes.

    image_features: (E, n_visual, d); prompts: (E, P) token ids, P >= 1.
    Vision is encoded once per episode. All prompt tokens except the last are
    committed; the last one is the pending newest token that the first decode
    step processes. With ``pad_system_prompt=False`` the first prompt token
    (the system/BOS slot) is kept as-is in the masked-text conditions.
    ``with_aux=False`` keeps only the FULL condition (plain decoding).
    """
    cfg = weights.config
    images = np.asarray(image_features, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    prompts = np.asarray(prompts, dtype=np.intp)
    if prompts.ndim == 1:
        prompts = prompts[None]
    if prompts.shape[1] < 1:
        raise ConfigError("prompt must be non-empty")
    if prompts.shape[0] != images.shape[0]:
        raise ShapeError(f"{images.shape[0]} images but {prompts.shape[0]} prompts")
    if np.any(prompts < 0) or np.any(prompts >= cfg.vocab_size):
        raise ConfigError("prompt token outside the vocabulary")
    E = prompts.shape[0]
    vision = encode_vision(images, weights)
    zeros = np.zeros_like(vision)

    head = prompts[:, :-1]
    masked = np.full_like(head, cfg.pad_token)
    if not pad_system_prompt and head.shape[1]:
        masked[:, 0] = head[:, 0]
    text_full = embed_tokens(head, weights)
    text_pad = embed_tokens(masked, weights)

    seqs = {
        Coalition.FULL: np.concatenate([vision, text_full], axis=1),
        Coalition.V_ONLY: np.concatenate([vision, text_pad], axis=1),
        Coalition.T_ONLY: np.concatenate([zeros, text_full], axis=1),
        Coalition.NONE: np.concatenate([zeros, text_pad], axis=1),
    }
    full = KvCache(cfg, E)
    forward(weights, full, seqs[Coalition.FULL], commit=True)
    aux = None
    if with_aux:
        aux = KvCache(cfg, 3 * E)
        forward(weights, aux, np.concatenate([seqs[c] for c in AUX_ORDER]), commit=True)

    caches = CoalitionCaches(weights, full, aux, vision, prompts[:, -1].copy(), pad_system_prompt,
                             np.ones(E, dtype=np.int64), np.zeros((E, 4), dtype=np.int64),
                             2 if with_aux else 1)
    return caches


def init_episode(image_features, prompt_tokens, weights: DecoderWeights, **kw) -> CoalitionCaches:
    return init_episodes(np.asarray(image_features)[None], np.asarray(prompt_tokens)[None], weights, **kw)


def full_forward(caches: CoalitionCaches, hook=None, rows=None, count: bool = True) -> ForwardResult:
    """FULL-condition pass over the pending token (optionally a subset of rows)."""
    w = caches.weights
    if rows is None:
        res = forward(w, caches.full, embed_tokens(caches.pending_text, w)[:, None, :], hook=hook)
        if count:
            caches.forwards[:, Coalition.FULL] += 1
        return res
    rows = np.asarray(rows, dtype=np.intp)
    sub = caches.full.take(rows)
    res = forward(w, sub, embed_tokens(caches.pending_text[rows], w)[:, None, :], hook=hook)
    if count:
        caches.forwards[rows, Coalition.FULL] += 1
    return res


def auxiliary_logits(caches: CoalitionCaches) -> np.ndarray:
    """V_ONLY, T_ONLY, NONE logits for the current step in one batched pass.

    Returns an array of shape (3, E, V) in ``AUX_ORDER``. The aux keys/values
    are held until :func:`append_committed_token`.
    """
    res = forward(caches.weights, caches.aux, caches.aux_pending_embeddings()[:, None, :])
    caches._pending_aux_kv = (res.k_new, res.v_new)
    for c in AUX_ORDER:
        caches.forwards[:, c] += 1
    E = caches.n_episodes
    return res.logits.reshape(3, E, -1)


def auxiliary_logits_sequential(caches: CoalitionCaches) -> np.ndarray:
    """Reference path: each condition on its own; no state change."""
    out = []
    w = caches.weights
    for c in AUX_ORDER:
        x = embed_tokens(caches.pending_tokens(c), w)[:, None, :]
        out.append(forward(w, caches.cache_for(c), x).logits)
    return np.stack(out)


def set_full_pending(caches: CoalitionCaches, result: ForwardResult) -> None:
    caches._pending_full_kv = (result.k_new, result.v_new)


def append_committed_token(caches: CoalitionCaches, chosen) -> CoalitionCaches:
    """Commit this step's keys/values in all four conditions and queue ``chosen``.

    FULL and T_ONLY continue with the chosen token; V_ONLY and NONE continue
    with pad so the text stream stays masked as it grows.
    """
    if caches._pending_full_kv is None or (caches.aux is not None and caches._pending_aux_kv is None):
        raise ShapeError("no pending step to commit: run the FULL and auxiliary passes first")
    chosen = np.atleast_1d(np.asarray(chosen, dtype=np.intp))
    if chosen.shape != (caches.n_episodes,):
        raise ShapeError(f"expected {caches.n_episodes} chosen tokens, got {chosen.shape}")
    caches.full.append(*caches._pending_full_kv)
    if caches.aux is not None:
        caches.aux.append(*caches._pending_aux_kv)
    caches._pending_full_kv = caches._pending_aux_kv = None
    caches.pending_text = chosen.copy()
    return caches

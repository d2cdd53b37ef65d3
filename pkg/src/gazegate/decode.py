"""The per-step control loop: sense, gate, re-run with the boost, sample, commit."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .coalitions import (Coalition, CoalitionCaches, auxiliary_logits, full_forward,
                         init_episodes)
from .decoder import DecoderWeights, ForwardResult
from .exceptions import ConfigError
from .intervention import STATISTICS, InterventionPlan, apply_to_layers
from .numerics import make_rng, sample_categorical, softmax
from .sensor import sense_batch, top_k
from .telemetry import EpisodeReport, StepTrace, band_visual_ratio, hdi_batch

STRATEGIES = ("greedy", "nucleus", "beam")
GATES = ("cds", "none", "entropy", "margin")


@dataclass(frozen=True)
class DecodePolicy:
    strategy: str = "nucleus"
    temperature: float = 1.0
    top_p: float = 1.0
    beam_width: int = 1
    max_new_tokens: int = 24
    k: int = 8
    kappa: float = 1.8
    alpha: float = 0.5
    layer_band: Optional[tuple] = None      # None: the decoder's band; (): no layers
    statistic: str = "mean_abs"
    persist: bool = True
    seed: int = 0
    gate: str = "cds"
    gate_threshold: float = 0.0
    hdi_scope: str = "center"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.gate not in GATES:
            raise ConfigError(f"unknown gate {self.gate!r}")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"unknown statistic {self.statistic!r}")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if not self.temperature > 0 or not 0 < self.top_p <= 1:
            raise ConfigError("temperature must be > 0 and top_p in (0, 1]")
        if self.hdi_scope not in ("center", "band"):
            raise ConfigError(f"unknown hdi_scope {self.hdi_scope!r}")
        if self.layer_band is not None:
            object.__setattr__(self, "layer_band", tuple(int(b) for b in self.layer_band))

    def with_(self, **kw) -> "DecodePolicy":
        return replace(self, **kw)


@dataclass
class EpisodeBatch:
    """Lockstep decoding state for E episodes."""

    caches: CoalitionCaches
    rngs: list
    token_class: np.ndarray
    step: int = 0
    tokens: list = field(default_factory=list)      # per step: (E,) chosen tokens
    traces: list = field(default_factory=list)      # per episode: list[StepTrace]
    done: np.ndarray = None

    @property
    def n_episodes(self) -> int:
        return self.caches.n_episodes


def default_token_classes(vocab_size: int) -> np.ndarray:
    return np.array(["other"] * vocab_size, dtype=object)


def start_batch(weights: DecoderWeights, images, prompts, policy: DecodePolicy, *,
                seeds: Optional[Sequence[int]] = None, token_class=None,
                pad_system_prompt: bool = True) -> EpisodeBatch:
    caches = init_episodes(images, prompts, weights, pad_system_prompt=pad_system_prompt,
                           with_aux=policy.gate != "none")
    E = caches.n_episodes
    if seeds is None:
        seeds = [policy.seed + e for e in range(E)]
    if token_class is None:
        token_class = default_token_classes(weights.config.vocab_size)
    return EpisodeBatch(caches, [make_rng(s) for s in seeds], np.asarray(token_class, dtype=object),
                        traces=[[] for _ in range(E)], done=np.zeros(E, dtype=bool))


def _telemetry_layers(policy: DecodePolicy, weights: DecoderWeights):
    lo, hi = policy.layer_band or weights.config.layer_band
    band = range(lo, hi + 1)
    hdi_layers = [(lo + hi) // 2] if policy.hdi_scope == "center" else list(band)
    return band, hdi_layers


def _entropy(logits: np.ndarray) -> np.ndarray:
    p = softmax(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)


def _margin(logits: np.ndarray) -> np.ndarray:
    top2 = -np.sort(-logits, axis=-1)[:, :2]
    return top2[:, 0] - top2[:, 1]


@dataclass
class StepOutcome:
    """Everything a step computed before the token choice."""

    logits: np.ndarray        # distribution used for the choice (post-FCI where beta=1)
    beta: np.ndarray
    D: np.ndarray
    k_new: np.ndarray
    v_new: np.ndarray
    hdi_pre: np.ndarray
    hdi_post: np.ndarray
    ratio_pre: np.ndarray
    ratio_post: np.ndarray
    entropy: np.ndarray
    margin: np.ndarray
    fwd: np.ndarray


def sense_and_intervene(state: EpisodeBatch, policy: DecodePolicy,
                        gate: Optional[Callable] = None) -> StepOutcome:
    """Steps (1)-(5) of a decode step for every row; counts forwards for live rows."""
    caches = state.caches
    w = caches.weights
    cfg = w.config
    live = ~state.done
    E = caches.n_episodes

    res0 = full_forward(caches, count=False)
    caches.forwards[live, Coalition.FULL] += 1
    fwd = live.astype(np.int64)
    ent, mar = _entropy(res0.logits), _margin(res0.logits)

    if policy.gate == "none":
        D = np.full(E, np.nan)
        beta = np.zeros(E, dtype=np.int64)
    else:
        aux = auxiliary_logits(caches)
        caches.forwards[~live, 1:] -= 1
        fwd = fwd + 3 * live
        cand = top_k(res0.logits, policy.k).tokens
        _, D, beta = sense_batch(cand, res0.logits, aux[0], aux[1], aux[2], policy.kappa)
        if policy.gate == "entropy":
            beta = (ent > policy.gate_threshold).astype(np.int64)
        elif policy.gate == "margin":
            beta = (mar < policy.gate_threshold).astype(np.int64)
    if gate is not None:
        beta = np.asarray(gate(res0.logits, D), dtype=np.int64)
    beta = beta * live

    logits = res0.logits.copy()
    k_new, v_new = res0.k_new.copy(), res0.v_new.copy()
    attn_post = res0.attention.copy()
    rows = np.flatnonzero(beta)
    if rows.size:
        band = policy.layer_band if policy.layer_band is not None else cfg.layer_band
        plan = InterventionPlan(1, policy.alpha, None, band or None, policy.statistic)
        hook = apply_to_layers(plan, cfg.n_layers, cfg.n_visual_slots)
        res1 = full_forward(caches, hook=hook, rows=rows, count=False)
        caches.forwards[rows, Coalition.FULL] += 1
        fwd[rows] += 1
        logits[rows] = res1.logits
        attn_post[rows] = res1.attention
        if policy.persist:
            k_new[rows] = res1.k_new
            v_new[rows] = res1.v_new

    band, hdi_layers = _telemetry_layers(policy, w)
    hdi_pre = np.mean(hdi_batch(res0.attention[:, hdi_layers]), axis=1)
    hdi_post = np.mean(hdi_batch(attn_post[:, hdi_layers]), axis=1)
    nv = cfg.n_visual_slots
    return StepOutcome(logits, beta, D, k_new, v_new, hdi_pre, hdi_post,
                       band_visual_ratio(res0.attention, nv, band),
                       band_visual_ratio(attn_post, nv, band), ent, mar, fwd)


def _choose(logits: np.ndarray, state: EpisodeBatch, policy: DecodePolicy) -> np.ndarray:
    E = logits.shape[0]
    out = np.full(E, state.caches.weights.config.pad_token, dtype=np.int64)
    for e in range(E):
        if state.done[e]:
            continue
        if policy.strategy == "greedy":
            out[e] = int(np.argmax(logits[e]))
        else:
            p = softmax(logits[e])
            out[e] = sample_categorical(p, state.rngs[e], policy.top_p, policy.temperature)
    return out


def _commit(caches: CoalitionCaches, k_new, v_new) -> None:
    caches.full.append(k_new, v_new)
    if caches.aux is not None:
        caches.aux.append(*caches._pending_aux_kv)
    caches._pending_aux_kv = None


def decode_step(state: EpisodeBatch, policy: DecodePolicy, gate: Optional[Callable] = None):
    """One lockstep step for every live episode.

    Returns (chosen tokens (E,), traces for live rows as {episode: StepTrace}).
    """
    caches = state.caches
    cfg = caches.weights.config
    prev = caches.pending_text.copy()
    out = sense_and_intervene(state, policy, gate)
    chosen = _choose(out.logits, state, policy)

    _commit(caches, out.k_new, out.v_new)
    caches.pending_text = chosen.copy()

    emitted = {}
    for e in np.flatnonzero(~state.done):
        tr = StepTrace(
            step=state.step, token=int(chosen[e]), token_class=str(state.token_class[chosen[e]]),
            beta=int(out.beta[e]), D=float(out.D[e]), hdi_pre=float(out.hdi_pre[e]),
            hdi_post=float(out.hdi_post[e]), var_ratio_pre=float(out.ratio_pre[e]),
            var_ratio_post=float(out.ratio_post[e]), fwd_count=int(out.fwd[e]),
            prev_token=int(prev[e]), prev_class=str(state.token_class[prev[e]]),
            entropy=float(out.entropy[e]), margin=float(out.margin[e]))
        state.traces[e].append(tr)
        emitted[int(e)] = tr
    state.tokens.append(chosen)
    state.done = state.done | (chosen == cfg.end_token)
    state.step += 1
    return chosen, emitted


def _reports(state: EpisodeBatch) -> list:
    caches = state.caches
    out = []
    for e in range(state.n_episodes):
        toks = [t.token for t in state.traces[e]]
        out.append(EpisodeReport(
            tokens=toks, traces=state.traces[e], total_forwards=int(caches.forwards[e].sum()),
            vision_encodes=int(caches.vision_encodes[e]), prefill_forwards=caches.prefill_forwards))
    return out


def generate_batch(weights: DecoderWeights, images, prompts, policy: DecodePolicy, *,
                   seeds=None, token_class=None, gate=None, pad_system_prompt: bool = True) -> list:
    if policy.strategy == "beam":
        return beam_generate_batch(weights, images, prompts, policy, token_class=token_class,
                                   pad_system_prompt=pad_system_prompt)
    state = start_batch(weights, images, prompts, policy, seeds=seeds, token_class=token_class,
                        pad_system_prompt=pad_system_prompt)
    while state.step < policy.max_new_tokens and not state.done.all():
        decode_step(state, policy, gate)
    return _reports(state)


def generate(weights: DecoderWeights, image_features, prompt, policy: DecodePolicy, *,
             seed: Optional[int] = None, token_class=None, gate=None) -> EpisodeReport:
    if policy.max_new_tokens < 1:
        raise ConfigError("max_new_tokens must be >= 1")
    seeds = [policy.seed if seed is None else seed]
    return generate_batch(weights, np.asarray(image_features)[None], np.asarray(prompt)[None],
                          policy, seeds=seeds, token_class=token_class, gate=gate)[0]


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits, axis=-1, keepdims=True)
    return logits - m - np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True))


def beam_generate_batch(weights: DecoderWeights, images, prompts, policy: DecodePolicy, *,
                        token_class=None, pad_system_prompt: bool = True) -> list:
    """Length-normalized beam search; each hypothesis owns its four caches.

    Rows are laid out episode-major (E * W rows). Every episode starts with a
    single live hypothesis; the other slots hold -inf scores until filled.
    """
    W = policy.beam_width
    images = np.asarray(images, dtype=np.float64)
    prompts = np.asarray(prompts)
    E = prompts.shape[0]
    rep = np.repeat(np.arange(E), W)
    state = start_batch(weights, images[rep], prompts[rep], policy, seeds=[0] * (E * W),
                        token_class=token_class, pad_system_prompt=pad_system_prompt)
    cfg = weights.config
    V = cfg.vocab_size
    score = np.full(E * W, -np.inf)
    score[::W] = 0.0
    length = np.zeros(E * W)
    finished = np.zeros(E * W, dtype=bool)
    traces = [[] for _ in range(E * W)]
    # forward counts per row lineage
    lineage_fwd = np.zeros(E * W, dtype=np.int64)

    for step in range(policy.max_new_tokens):
        if finished[np.isfinite(score)].all():
            break
        state.done = finished | ~np.isfinite(score)
        prev = state.caches.pending_text.copy()
        out = sense_and_intervene(state, policy)
        lp = _log_softmax(out.logits)
        cand = np.where(state.done[:, None], -np.inf, score[:, None] + lp)       # (E*W, V)
        new_len = length + 1
        norm = cand / new_len[:, None]
        # a finished (or empty) slot only carries itself forward, unchanged
        keep_self = np.full((E * W, V), -np.inf)
        keep_self[:, cfg.pad_token] = np.where(finished, score / np.maximum(length, 1), -np.inf)
        norm = np.where(state.done[:, None], keep_self, norm)

        norm = norm.reshape(E, W * V)
        order = np.argsort(-norm, axis=1, kind="stable")[:, :W]                 # (E, W)
        parent = (order // V) + (np.arange(E) * W)[:, None]
        tok = order % V
        parent, tok = parent.ravel(), tok.ravel()
        picked = np.take_along_axis(norm, order, axis=1).ravel()

        _commit(state.caches, out.k_new, out.v_new)
        state.caches = state.caches.take(parent)
        was_finished = finished[parent]
        new_score = np.where(was_finished, score[parent],
                             cand[parent, tok])
        new_length = np.where(was_finished, length[parent], length[parent] + 1)
        new_traces = []
        for r in range(E * W):
            p = parent[r]
            tr_list = list(traces[p])
            if np.isfinite(picked[r]) and not was_finished[r]:
                e = p
                tr_list.append(StepTrace(
                    step=step, token=int(tok[r]), token_class=str(state.token_class[tok[r]]),
                    beta=int(out.beta[e]), D=float(out.D[e]), hdi_pre=float(out.hdi_pre[e]),
                    hdi_post=float(out.hdi_post[e]), var_ratio_pre=float(out.ratio_pre[e]),
                    var_ratio_post=float(out.ratio_post[e]), fwd_count=int(out.fwd[e]),
                    prev_token=int(prev[e]), prev_class=str(state.token_class[prev[e]]),
                    entropy=float(out.entropy[e]), margin=float(out.margin[e])))
            new_traces.append(tr_list)
        lineage_fwd = lineage_fwd[parent] + np.where(was_finished, 0, out.fwd[parent])
        traces = new_traces
        score = np.where(np.isfinite(picked), new_score, -np.inf)
        length = new_length
        finished = was_finished | ((tok == cfg.end_token) & np.isfinite(picked))
        state.caches.pending_text = np.where(was_finished, cfg.pad_token, tok)
        state.step += 1

    reports = []
    for e in range(E):
        rows = np.arange(e * W, (e + 1) * W)
        normed = np.where(np.isfinite(score[rows]), score[rows] / np.maximum(length[rows], 1), -np.inf)
        best = rows[int(np.argmax(normed))]
        trs = traces[best]
        reports.append(EpisodeReport(
            tokens=[t.token for t in trs], traces=trs, total_forwards=int(lineage_fwd[best]),
            vision_encodes=1, prefill_forwards=state.caches.prefill_forwards,
            extra={"beam_score": float(normed.max())}))
    return reports


def beam_generate(weights: DecoderWeights, image_features, prompt, policy: DecodePolicy,
                  token_class=None) -> EpisodeReport:
    if policy.beam_width < 1:
        raise ConfigError("beam_width must be >= 1")
    return beam_generate_batch(weights, np.asarray(image_features)[None], np.asarray(prompt)[None],
                               policy, token_class=token_class)[0]

"""Planted text-inertia scenarios and the paired-seed experiment runner.

The planted decoder is built by hand so that ground truth is known:

* every visual slot carries the classes of the objects present;
* a cue token in the prompt carries a biased class, scaled by ``prior``;
* a per-layer drift bias ``-drift * t`` pulls attention off visual columns as
  the text grows, until the cue outweighs the image (text inertia);
* generation alternates content and function words, so the step type is set
  by the previous token.

Readout heads live only in the middle band (layers 4-8): boosting visual
columns there restores grounding, boosting elsewhere changes nothing.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .decode import DecodePolicy, generate_batch
from .decoder import DecoderConfig, DecoderWeights
from .exceptions import ConfigError
from .telemetry import EpisodeReport, trigger_stats

# residual-stream layout of the planted decoder (d_model = 32)
CLS_IN = 0          # 8 dims: class carried by an input (visual slot or cue token)
CLS_OUT = 8         # 8 dims: class read by the middle-band readout heads
IS_FN = 16
IS_CONTENT = 17
IS_VIS = 18
IS_TEXT = 19
MARK = 20           # layout marker, present in visual slot 0 only
RIG_OUT = 21        # marker mass read by the visual head
RIG_GATE = 22       # gated marker signal feeding the rigid function word
BALANCE = 29        # keeps every residual vector zero-mean so LayerNorm never shifts it
ANCHOR_POS = 30
ANCHOR_NEG = 31

ANCHOR = 64.0       # dominates LayerNorm statistics, so LN(x) ~ x / 16 elsewhere
LN_GAIN = ANCHOR / 4.0

PAD, BOS, EOS = 0, 1, 2
GATE_LAYER = 9


@dataclass(frozen=True)
class Vocabulary:
    n_classes: int = 8

    @property
    def cue_tokens(self) -> np.ndarray:
        return np.arange(3, 3 + self.n_classes)

    @property
    def filler_tokens(self) -> np.ndarray:
        return np.arange(3 + self.n_classes, 16)

    @property
    def function_tokens(self) -> np.ndarray:
        return np.arange(16, 16 + self.n_classes)

    @property
    def content_tokens(self) -> np.ndarray:
        return np.arange(16 + self.n_classes, 16 + 2 * self.n_classes)

    @property
    def size(self) -> int:
        return 16 + 2 * self.n_classes

    @property
    def rigid_token(self) -> int:
        return int(self.function_tokens[0])

    def token_classes(self) -> np.ndarray:
        out = np.array(["other"] * self.size, dtype=object)
        out[self.function_tokens] = "function"
        out[self.content_tokens] = "content"
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    n_classes: int = 8
    n_objects: int = 2              # true classes present in every image
    drift: float = 0.11             # lambda: per-text-position pull off the image
    prior: float = 13.0             # rho: weight of the cue's class in the readout
    episodes: int = 500
    seed: int = 0
    max_new_tokens: int = 24
    # construction gains (attention scores are in units of pre-softmax logits)
    visual_score: float = 1.0       # visual head's affinity for visual slots
    marker_score: float = 24.0      # marker head's affinity for slot 0 (band centre only)
    text_score: float = 8.0         # text head's aversion to visual slots
    content_gain: float = 20.0
    function_gain: float = 10.0
    rigid_gain: float = 30.0
    rigid_threshold: float = 0.1
    rigid_logit: float = 1.0
    gate_bias: float = 50.0
    other_penalty: float = 30.0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_classes > 8:
            raise ConfigError("planted decoder supports 2..8 object classes")
        if not 1 <= self.n_objects < self.n_classes:
            raise ConfigError("n_objects must be in [1, n_classes)")
        if self.drift < 0 or self.prior < 0:
            raise ConfigError("drift and prior must be >= 0")
        if self.episodes < 1 or self.max_new_tokens < 1:
            raise ConfigError("episodes and max_new_tokens must be >= 1")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_classes)


@dataclass
class PlantedWorld:
    spec: ScenarioSpec
    config: DecoderConfig
    weights: DecoderWeights
    vocab: Vocabulary

    @property
    def token_class(self) -> np.ndarray:
        return self.vocab.token_classes()


@dataclass
class Episodes:
    images: np.ndarray      # (E, n_visual, d)
    prompts: np.ndarray     # (E, 3)
    truth: np.ndarray       # (E, n_objects) content tokens that are present
    biased: np.ndarray      # (E,) content token the cue pushes
    seeds: np.ndarray       # (E,) sampling seeds

    def __len__(self):
        return len(self.truth)

    def subset(self, sl) -> "Episodes":
        return Episodes(self.images[sl], self.prompts[sl], self.truth[sl], self.biased[sl], self.seeds[sl])


def planted_config(spec: ScenarioSpec) -> DecoderConfig:
    vocab = spec.vocab
    return DecoderConfig(n_layers=12, n_heads=4, d_model=32, vocab_size=vocab.size, n_visual_slots=32,
                         max_seq=32 + 3 + spec.max_new_tokens + 1, layer_band=(4, 8),
                         pad_token=PAD, end_token=EOS)


def _token_embeddings(spec: ScenarioSpec, cfg: DecoderConfig) -> np.ndarray:
    vocab = spec.vocab
    emb = np.zeros((cfg.vocab_size, cfg.d_model))
    emb[:, ANCHOR_POS] = ANCHOR
    emb[:, ANCHOR_NEG] = -ANCHOR
    emb[:, IS_TEXT] = 1.0
    for c, tok in enumerate(vocab.cue_tokens):
        emb[tok, CLS_IN + c] = spec.prior
    emb[vocab.function_tokens, IS_FN] = 1.0
    emb[vocab.content_tokens, IS_CONTENT] = 1.0
    return _balanced(emb)


def _balanced(rows: np.ndarray) -> np.ndarray:
    """Set the BALANCE column so each row (a write into the residual) sums to zero."""
    rows = rows.copy()
    rows[..., BALANCE] = 0.0
    rows[..., BALANCE] = -np.sum(rows, axis=-1)
    return rows


def build_planted_decoder(spec: ScenarioSpec) -> PlantedWorld:
    cfg = planted_config(spec)
    vocab = spec.vocab
    w = DecoderWeights.zeros(cfg)
    C = spec.n_classes
    dh = cfg.d_head
    root = np.sqrt(dh)
    w["tok_emb"] = _token_embeddings(spec, cfg)
    w["vis_proj"] = np.eye(cfg.d_model)
    w["drift"][:] = spec.drift

    # LN(anchor) ~ 4, LN(x) ~ x / LN_GAIN elsewhere; q = 1 from the anchor
    q_from_anchor = 1.0 / 4.0
    centre = (cfg.layer_band[0] + cfg.layer_band[1]) // 2
    for l in range(cfg.n_layers):
        wq, wk, wv, wo = w["wq"][l], w["wk"][l], w["wv"][l], w["wo"][l]
        # head 0: readout, flat scores (drift only)
        # head 1: visual head; at the band centre it locks onto the layout marker
        wq[ANCHOR_POS, 1 * dh] = q_from_anchor
        if l == centre:
            wk[MARK, 1 * dh] = spec.marker_score * root * LN_GAIN
        else:
            wk[IS_VIS, 1 * dh] = spec.visual_score * root * LN_GAIN
        # head 2: flat; head 3: keeps off visual slots
        wq[ANCHOR_POS, 3 * dh] = q_from_anchor
        wk[IS_VIS, 3 * dh] = -spec.text_score * root * LN_GAIN
        if cfg.layer_band[0] <= l <= cfg.layer_band[1]:
            for c in range(C):
                wv[CLS_IN + c, 0 * dh + c] = LN_GAIN
                wo[0 * dh + c, CLS_OUT + c] = 1.0
        if l == centre:
            # marker mass seen by the flat head: ~1/n unless slot 0 is boosted
            wv[MARK, 2 * dh] = LN_GAIN
            wo[2 * dh, RIG_OUT] = 1.0

    # gate: content logits open only when the newest token is a function word
    K = spec.gate_bias
    w1, b1, w2 = w["w1"][GATE_LAYER], w["b1"][GATE_LAYER], w["w2"][GATE_LAYER]
    for c in range(C):
        w1[CLS_OUT + c, c] = LN_GAIN
        w1[IS_FN, c] = K * LN_GAIN
        b1[c] = -K
        w2[c, CLS_IN + c] = 1.0
    # rigidity: a strong marker read at a function step favours one function word
    r = C
    w1[RIG_OUT, r] = spec.rigid_gain * LN_GAIN
    w1[IS_CONTENT, r] = K * LN_GAIN
    b1[r] = -K - spec.rigid_gain * spec.rigid_threshold
    w2[r, RIG_GATE] = 1.0

    wu = w["w_u"]
    for c, tok in enumerate(vocab.content_tokens):
        wu[CLS_IN + c, tok] = spec.content_gain * LN_GAIN
    wu[IS_CONTENT, vocab.function_tokens] = spec.function_gain * LN_GAIN
    wu[RIG_GATE, vocab.rigid_token] = spec.rigid_logit * LN_GAIN
    others = np.setdiff1d(np.arange(cfg.vocab_size), np.concatenate([vocab.content_tokens, vocab.function_tokens]))
    wu[ANCHOR_POS, others] = -spec.other_penalty / 4.0

    w["wo"] = _balanced(w["wo"])
    w["w2"] = _balanced(w["w2"])
    weights = DecoderWeights(**w, config=cfg)
    return PlantedWorld(spec, cfg, weights, vocab)


def image_features(spec: ScenarioSpec, true_classes, cfg: Optional[DecoderConfig] = None) -> np.ndarray:
    cfg = cfg or planted_config(spec)
    img = np.zeros((cfg.n_visual_slots, cfg.d_model))
    img[:, ANCHOR_POS] = ANCHOR
    img[:, ANCHOR_NEG] = -ANCHOR
    img[:, IS_VIS] = 1.0
    img[0, MARK] = 1.0
    img[:, CLS_IN + np.atleast_1d(true_classes)] = 1.0
    return _balanced(img)


def make_episodes(spec: ScenarioSpec, n: Optional[int] = None) -> Episodes:
    """Deterministic episode inputs; episode e depends only on (seed, e)."""
    n = spec.episodes if n is None else n
    vocab = spec.vocab
    cfg = planted_config(spec)
    imgs, prompts, truth, biased, seeds = [], [], [], [], []
    for e in range(n):
        ss = np.random.SeedSequence([spec.seed, e])
        rng = np.random.default_rng(ss)
        perm = rng.permutation(spec.n_classes)
        c, b = np.sort(perm[:spec.n_objects]), int(perm[spec.n_objects])
        f = int(rng.choice(vocab.function_tokens))
        imgs.append(image_features(spec, c, cfg))
        prompts.append([BOS, int(vocab.cue_tokens[b]), f])
        truth.append(vocab.content_tokens[c])
        biased.append(int(vocab.content_tokens[b]))
        seeds.append(int(ss.generate_state(1)[0]))
    return Episodes(np.stack(imgs), np.array(prompts), np.array(truth), np.array(biased), np.array(seeds))


# ---------------------------------------------------------------------------
# oracle


def oracle_step0_logits(world: PlantedWorld, image, prompt) -> np.ndarray:
    """Step-0 logits by direct per-head arithmetic over the whole sequence.

    Independent of the cached, batched decoder path: no KV cache, no stacked
    matmuls, one head and one query row at a time.
    """
    w, cfg = world.weights, world.config
    x = np.vstack([np.asarray(image, dtype=np.float64) @ w.vis_proj, w.tok_emb[np.asarray(prompt)]])
    n, dh, nv = x.shape[0], cfg.d_head, cfg.n_visual_slots

    def ln(v, g, b):
        return (v - v.mean()) / np.sqrt(v.var() + 1e-5) * g + b

    for l in range(cfg.n_layers):
        a = np.array([ln(r, w.ln1_g[l], w.ln1_b[l]) for r in x])
        out = np.zeros_like(x)
        for i in range(n):
            ctx = np.zeros(cfg.d_model)
            for h in range(cfg.n_heads):
                cols = slice(h * dh, (h + 1) * dh)
                q = a[i] @ w.wq[l][:, cols]
                s = np.array([q @ (a[j] @ w.wk[l][:, cols]) / np.sqrt(dh) for j in range(i + 1)])
                s[:min(nv, i + 1)] -= w.drift[l] * max(i - nv, 0)
                p = np.exp(s - s.max())
                p /= p.sum()
                ctx[cols] = sum(p[j] * (a[j] @ w.wv[l][:, cols]) for j in range(i + 1))
            out[i] = ctx @ w.wo[l]
        x = x + out
        f = np.array([ln(r, w.ln2_g[l], w.ln2_b[l]) for r in x])
        x = x + np.maximum(f @ w.w1[l] + w.b1[l], 0.0) @ w.w2[l] + w.b2[l]
    return ln(x[-1], w.lnf_g, w.lnf_b) @ w.w_u


# ---------------------------------------------------------------------------
# experiments

ARMS = ("baseline", "cg", "static", "entropy", "margin")


def arm_policy(name: str, policy: DecodePolicy) -> DecodePolicy:
    """The policy an arm runs, derived from the CG policy."""
    if name == "baseline":
        return policy.with_(gate="none")
    if name == "cg":
        return policy.with_(gate="cds")
    if name == "static":
        return policy.with_(gate="cds", kappa=-1.0)
    if name in ("entropy", "margin"):
        return policy.with_(gate=name)
    raise ConfigError(f"unknown arm {name!r}")


def _run_chunk(args):
    spec, policy, lo, hi = args
    world = build_planted_decoder(spec)
    eps = make_episodes(spec).subset(slice(lo, hi))
    reps = generate_batch(world.weights, eps.images, eps.prompts, policy, seeds=eps.seeds,
                          token_class=world.token_class)
    score_episodes(reps, eps.truth)
    return reps


def score_episodes(reports, truth) -> None:
    """Fill ground truth and hallucination counts; a content step follows a function word."""
    for r, tr in zip(reports, truth):
        r.ground_truth = [int(t) for t in np.atleast_1d(tr)]
        content = [t for t in r.traces if t.prev_class == "function"]
        r.content_steps = len(content)
        r.hallucinations = sum(t.token not in r.ground_truth for t in content)


def run_arm(spec: ScenarioSpec, policy: DecodePolicy, *, chunk: int = 100, jobs: int = 1) -> list:
    """All episodes of ``spec`` under one policy, in episode order."""
    bounds = [(spec, policy, lo, min(lo + chunk, spec.episodes)) for lo in range(0, spec.episodes, chunk)]
    if jobs > 1 and len(bounds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk, bounds))
    else:
        parts = [_run_chunk(b) for b in bounds]
    return [r for part in parts for r in part]


def hallucination_rate(reports) -> float:
    """Pooled over content steps: emitted token not among the objects present."""
    steps = sum(r.content_steps for r in reports)
    return sum(r.hallucinations for r in reports) / steps if steps else float("nan")


def _triggered(reports):
    return [t for r in reports for t in r.traces if t.beta]


@dataclass
class ArmMetrics:
    hallucination_rate: float
    trigger_rate: float
    distinct2: float
    hdi_delta: float              # mean post - pre HDI over triggered steps
    median_hdi_pre: float
    median_hdi_post: float
    median_ratio_pre: float
    median_ratio_post: float
    by_class: dict
    gate_threshold: float = float("nan")

    @classmethod
    def of(cls, reports, gate_threshold=float("nan")) -> "ArmMetrics":
        traces = [t for r in reports for t in r.traces]
        trig = _triggered(reports)
        med = lambda xs: float(np.median(xs)) if xs else float("nan")
        return cls(
            hallucination_rate=hallucination_rate(reports),
            trigger_rate=float(np.mean([t.beta for t in traces])) if traces else 0.0,
            distinct2=float(np.nanmean([r.distinct2 for r in reports])),
            hdi_delta=float(np.mean([t.hdi_post - t.hdi_pre for t in trig])) if trig else 0.0,
            median_hdi_pre=med([t.hdi_pre for t in trig]),
            median_hdi_post=med([t.hdi_post for t in trig]),
            median_ratio_pre=med([t.var_ratio_pre for t in trig]),
            median_ratio_post=med([t.var_ratio_post for t in trig]),
            by_class=trigger_stats(traces),
            gate_threshold=gate_threshold,
        )


@dataclass
class RunComparison:
    spec: ScenarioSpec
    policy: DecodePolicy
    reports: dict                 # arm -> list[EpisodeReport], episode order
    metrics: dict                 # arm -> ArmMetrics

    def reduction(self, arm: str = "cg", reference: str = "baseline") -> float:
        """Relative hallucination reduction of ``arm`` against ``reference``."""
        base = self.metrics[reference].hallucination_rate
        return (base - self.metrics[arm].hallucination_rate) / base if base else float("nan")

    def summary(self) -> dict:
        out = {"spec": asdict(self.spec), "policy": asdict(self.policy),
               "arms": {a: asdict(m) for a, m in self.metrics.items()}}
        if "baseline" in self.metrics:
            out["reduction"] = {a: self.reduction(a) for a in self.metrics if a != "baseline"}
        return out


def calibrate_threshold(reports, gate: str, rate: float) -> float:
    """Entropy/margin threshold whose trigger rate on ``reports`` matches ``rate``."""
    if gate == "entropy":
        vals = np.sort([t.entropy for r in reports for t in r.traces])
    else:
        vals = np.sort([-t.margin for r in reports for t in r.traces])
    u = np.unique(vals)
    # candidate cuts: above everything, between neighbours, below everything
    cuts = np.concatenate([[np.inf], 0.5 * (u[1:] + u[:-1])[::-1], [-np.inf]])
    rates = np.array([np.mean(vals > c) for c in cuts])
    thr = cuts[int(np.argmin(np.abs(rates - rate)))]      # ties resolve toward firing less
    return float(thr) if gate == "entropy" else float(-thr)


def run_comparison(spec: ScenarioSpec, policy: Optional[DecodePolicy] = None,
                   arms: Sequence[str] = ARMS, *, jobs: int = 1, chunk: int = 100) -> RunComparison:
    """Paired-seed episodes per arm.

    Entropy and margin gates are calibrated so that, on the CG arm's
    trajectories, they fire at CG's trigger rate.
    """
    if not arms:
        raise ConfigError("need at least one arm")
    for a in arms:
        if a not in ARMS:
            raise ConfigError(f"unknown arm {a!r}")
    policy = (policy or DecodePolicy()).with_(max_new_tokens=spec.max_new_tokens)
    reports, metrics = {}, {}
    ordered = sorted(arms, key=ARMS.index)
    needs_cg = any(a in ("entropy", "margin") for a in ordered)
    if needs_cg and "cg" not in ordered:
        ordered = ["cg"] + ordered
    for arm in ordered:
        pol = arm_policy(arm, policy)
        thr = float("nan")
        if arm in ("entropy", "margin"):
            cg = reports["cg"]
            thr = calibrate_threshold(cg, arm, metrics["cg"].trigger_rate)
            pol = pol.with_(gate_threshold=thr)
        reports[arm] = run_arm(spec, pol, chunk=chunk, jobs=jobs)
        metrics[arm] = ArmMetrics.of(reports[arm], thr)
    keep = [a for a in ARMS if a in arms]
    return RunComparison(spec, policy, {a: reports[a] for a in keep}, {a: metrics[a] for a in keep})


SWEEP_PARAMS = ("kappa", "alpha", "layer_band", "statistic")


@dataclass
class SweepTable:
    parameter: str
    baseline: ArmMetrics
    rows: list = field(default_factory=list)      # (value, ArmMetrics)

    def column(self, name: str) -> list:
        return [getattr(m, name) for _, m in self.rows]

    def reductions(self) -> list:
        b = self.baseline.hallucination_rate
        return [(b - m.hallucination_rate) / b if b else float("nan") for _, m in self.rows]

    def as_rows(self) -> list:
        out = []
        for (v, m), red in zip(self.rows, self.reductions()):
            out.append({"value": list(v) if isinstance(v, tuple) else v,
                        "hallucination_rate": m.hallucination_rate, "reduction": red,
                        "trigger_rate": m.trigger_rate, "distinct2": m.distinct2,
                        "hdi_delta": m.hdi_delta})
        return out


def sweep(spec: ScenarioSpec, parameter: str, grid, policy: Optional[DecodePolicy] = None, *,
          jobs: int = 1, chunk: int = 100) -> SweepTable:
    """CG arm at every grid point against one shared baseline run."""
    if parameter not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {parameter!r}; choose from {SWEEP_PARAMS}")
    grid = list(grid)
    if not grid:
        raise ConfigError("empty sweep grid")
    policy = (policy or DecodePolicy()).with_(max_new_tokens=spec.max_new_tokens)
    base = ArmMetrics.of(run_arm(spec, arm_policy("baseline", policy), chunk=chunk, jobs=jobs))
    table = SweepTable(parameter, base)
    for value in grid:
        v = tuple(value) if parameter == "layer_band" else value
        pol = arm_policy("cg", policy).with_(**{parameter: v})
        table.rows.append((v, ArmMetrics.of(run_arm(spec, pol, chunk=chunk, jobs=jobs))))
    return table

"""Acceptance checks shared by ``gazegate verify`` and the test suite.

Each check returns a :class:`CheckResult`; a check that overruns its runtime
budget fails even if its assertions hold.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .coalitions import auxiliary_logits, auxiliary_logits_sequential, init_episodes
from .decode import DecodePolicy, generate_batch
from .decoder import DecoderConfig, DecoderWeights, KvCache, forward
from .exceptions import ConfigError, GazeGateError
from .harness import (ScenarioSpec, build_planted_decoder, make_episodes, oracle_step0_logits,
                      run_comparison, sweep)
from .intervention import InterventionPlan, apply_to_layers, fci_boost
from .numerics import variance
from .sensor import harsanyi_interaction, sense, sweep_kappa, top_k
from .telemetry import hdi


@dataclass
class CheckResult:
    id: str
    group: str
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float


class CheckFailure(AssertionError):
    pass


def _require(cond, msg: str) -> None:
    if not cond:
        raise CheckFailure(msg)


# --- 1, 2: interaction and gate -------------------------------------------------

def check_harsanyi() -> str:
    _require(harsanyi_interaction(5.0, 2.0, 1.5, 0.5) == 2.0, "I(5, 2, 1.5, 0.5) != 2.0")
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        # additive head: logits = bias + readout(vision) + readout(text); masking zeroes a part
        V, d = 32, 16
        vis, txt = rng.normal(size=d), rng.normal(size=d)
        wv, wt, b = rng.normal(size=(d, V)), rng.normal(size=(d, V)), rng.normal(size=V)
        head = lambda v, t: b + v @ wv + t @ wt
        full, lv, lt, ln = head(vis, txt), head(vis, 0 * txt), head(0 * vis, txt), head(0 * vis, 0 * txt)
        cand = top_k(full, 8).tokens
        worst = max(worst, float(np.max(np.abs(harsanyi_interaction(full, lv, lt, ln)[cand]))))
    _require(worst < 1e-9, f"additive fixture max |I| = {worst:.3g}")
    return f"I=2.0 exact; additive max|I|={worst:.2e}"


def check_gate() -> str:
    _require(variance([0.0, 3.0]) == 2.25, "Var([0,3]) != 2.25")
    cand = top_k(np.array([3.0, 0.0]), 2)
    rec = lambda kappa: sense(cand, [3.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], kappa)
    _require(rec(1.8).beta == 1, "beta should be 1 at kappa=1.8")
    _require(rec(2.25).beta == 0, "beta should be 0 at kappa=2.25 (strict)")
    rng = np.random.default_rng(202)
    for _ in range(1000):
        D = rng.exponential(2.0, size=int(rng.integers(1, 50)))
        for _ in range(10):
            grid = np.sort(rng.uniform(-1, 10, size=8))
            rates = sweep_kappa(D, grid)
            _require(np.all(np.diff(rates) <= 0), "trigger rate increased with kappa")
            fired = D[None, :] > grid[:, None]
            _require(np.all(fired[1:] <= fired[:-1]), "a step fired at a larger kappa only")
    return "D=2.25; strict gate; monotone on 1000x10"


# --- 3: locality ----------------------------------------------------------------

def _random_setup(seed: int):
    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(n_layers=6, n_heads=4, d_model=16, vocab_size=24, n_visual_slots=6,
                        max_seq=16, layer_band=(2, 4))
    w = DecoderWeights.random(cfg, seed=seed, drift=float(rng.uniform(0, 0.3)))
    B, S = 2, int(rng.integers(2, 5))
    x = rng.uniform(-1, 1, size=(B, cfg.n_visual_slots + S, cfg.d_model))
    return cfg, w, x


def check_locality() -> str:
    scores = np.array([[0.4], [-0.2]])
    out = fci_boost(scores, InterventionPlan(1, 0.5, [0], None))
    _require(np.max(np.abs(out[:, 0] - [0.55, -0.05])) <= 1e-12, f"worked example gave {out[:, 0]}")
    for seed in range(100):
        cfg, w, x = _random_setup(seed)
        lo, hi = cfg.layer_band
        plan = InterventionPlan(1, 0.5, None, cfg.layer_band)
        hook = apply_to_layers(plan, cfg.n_layers, cfg.n_visual_slots)
        changed = set()

        def spy(l, s):
            o = hook(l, s)
            changed.update((l, h, j) for h, j in zip(*np.nonzero(np.any(o != s, axis=0))))
            return o

        base = forward(w, KvCache(cfg, x.shape[0]), x)
        intv = forward(w, KvCache(cfg, x.shape[0]), x, hook=spy)
        expect = {(l, h, j) for l in range(lo, hi + 1) for h in range(cfg.n_heads)
                  for j in range(cfg.n_visual_slots)}
        _require(changed == expect, f"seed {seed}: changed score set differs from band x visual")
        # earlier query rows never see the hook: their keys/values are unchanged in every layer
        _require(np.array_equal(base.k_new[:, :, :, :-1], intv.k_new[:, :, :, :-1])
                 and np.array_equal(base.v_new[:, :, :, :-1], intv.v_new[:, :, :, :-1]),
                 f"seed {seed}: earlier rows changed")
        # the newest row is identical below the band
        _require(np.array_equal(base.pre_softmax[:, :lo], intv.pre_softmax[:, :lo])
                 and np.array_equal(base.k_new[:, :lo + 1], intv.k_new[:, :lo + 1]),
                 f"seed {seed}: newest row changed below the band")
        for r in (base, intv):
            _require(np.max(np.abs(r.attention.sum(-1) - 1)) <= 1e-9, f"seed {seed}: rows do not sum to 1")
    return "worked example exact; 100 decoders local"


# --- 4: HDI ---------------------------------------------------------------------

def _kl_oracle(p, q) -> float:
    return sum(a * math.log(a / b) for a, b in zip(p, q) if a > 0)


def check_hdi() -> str:
    rng = np.random.default_rng(404)
    p = rng.dirichlet(np.ones(7))
    _require(abs(hdi(np.stack([p, p, p]))) <= 1e-12, "identical heads give nonzero HDI")
    P = [[0.5, 0.5], [0.9, 0.1]]
    ref = (_kl_oracle(P[0], P[1]) + _kl_oracle(P[1], P[0])) / 2
    got = hdi(np.array(P))
    _require(abs(got - 0.43945) <= 1e-4 and abs(got - ref) <= 1e-12, f"pair HDI {got}")
    for _ in range(100):
        rows = rng.dirichlet(np.ones(9), size=int(rng.integers(2, 7)))
        perm = rng.permutation(len(rows))
        _require(abs(hdi(rows) - hdi(rows[perm])) <= 1e-12, "HDI depends on head order")
    return f"pair HDI={got:.5f}"


# --- 5, 6: coalitions and non-interference ----------------------------------------

def check_accounting() -> str:
    spec = ScenarioSpec(episodes=10)
    world = build_planted_decoder(spec)
    eps = make_episodes(spec)
    reps = generate_batch(world.weights, eps.images, eps.prompts, DecodePolicy(max_new_tokens=spec.max_new_tokens),
                          seeds=eps.seeds, token_class=world.token_class)
    for e, r in enumerate(reps):
        _require(r.vision_encodes == 1, f"episode {e}: {r.vision_encodes} vision encodes")
        betas = sum(t.beta for t in r.traces)
        _require(r.total_forwards == 4 * r.steps + betas,
                 f"episode {e}: {r.total_forwards} forwards != 4*{r.steps}+{betas}")
    for seed in range(5):
        cfg = DecoderConfig(n_layers=4, n_heads=2, d_model=8, vocab_size=12, n_visual_slots=4,
                            max_seq=12, layer_band=(1, 2))
        w = DecoderWeights.random(cfg, seed=seed, drift=0.1)
        rng = np.random.default_rng(seed)
        caches = init_episodes(rng.uniform(-1, 1, (3, 4, 8)), rng.integers(1, 12, (3, 3)), w)
        seq = auxiliary_logits_sequential(caches)
        _require(np.array_equal(auxiliary_logits(caches), seq), f"seed {seed}: batched aux != sequential")
    return "encodes=1; forwards=4*steps+sum(beta); aux bitwise"


def check_noninterference() -> str:
    spec = ScenarioSpec(episodes=20, seed=6)
    world = build_planted_decoder(spec)
    eps = make_episodes(spec)
    base_pol = DecodePolicy(gate="none", max_new_tokens=spec.max_new_tokens)
    run = lambda pol: generate_batch(world.weights, eps.images, eps.prompts, pol, seeds=eps.seeds,
                                     token_class=world.token_class)
    base = [r.tokens for r in run(base_pol)]
    for label, pol in (("kappa=inf", base_pol.with_(gate="cds", kappa=math.inf)),
                       ("alpha=0", base_pol.with_(gate="cds", alpha=0.0))):
        got = [r.tokens for r in run(pol)]
        _require(got == base, f"{label} changed the decoded tokens")
    return "20 paired seeds identical"


# --- 7, 8: planted effect -------------------------------------------------------

@lru_cache(maxsize=1)
def _planted_comparison():
    return run_comparison(ScenarioSpec(), arms=("baseline", "cg", "static"))


def check_planted_effect() -> str:
    rc = _planted_comparison()
    m = rc.metrics
    b = m["baseline"].hallucination_rate
    red = rc.reduction("cg")
    msg = (f"base={b:.3f} cg={m['cg'].hallucination_rate:.3f} red={red:.2f} "
           f"D2 base={m['baseline'].distinct2:.3f} cg={m['cg'].distinct2:.3f} static={m['static'].distinct2:.3f}")
    _require(0.4 <= b <= 0.8, "baseline hallucination outside [0.4, 0.8]: " + msg)
    _require(red >= 0.5, "CG reduction below 50%: " + msg)
    _require(m["static"].distinct2 < m["cg"].distinct2, "static Distinct-2 not below CG: " + msg)
    d2b = m["baseline"].distinct2
    _require(abs(m["cg"].distinct2 - d2b) <= 0.1 * d2b, "CG Distinct-2 not within 10% of baseline: " + msg)
    return msg


def check_mechanism() -> str:
    m = _planted_comparison().metrics["cg"]
    cls = m.by_class
    msg = (f"HDI {m.median_hdi_pre:.3f}->{m.median_hdi_post:.3f} ratio {m.median_ratio_pre:.3f}->"
           f"{m.median_ratio_post:.3f} trig content={cls['content']['rate']:.3f} "
           f"function={cls['function']['rate']:.3f}")
    _require(m.median_hdi_post < m.median_hdi_pre, "median HDI did not drop: " + msg)
    _require(m.median_ratio_post > m.median_ratio_pre, "median visual ratio did not rise: " + msg)
    _require(cls["content"]["rate"] > cls["function"]["rate"], "content triggers not above function: " + msg)
    return msg


# --- 9: sweeps --------------------------------------------------------------------

KAPPA_GRID = (0.0, 1.0, 1.4, 1.8, 2.2, 5.0, 20.0, 100.0, math.inf)
SWEEP_EPISODES = 200


def check_sweeps() -> str:
    spec = ScenarioSpec(episodes=SWEEP_EPISODES)
    kt = sweep(spec, "kappa", KAPPA_GRID)
    rates, reds = kt.column("trigger_rate"), kt.reductions()
    _require(all(b <= a for a, b in zip(rates, rates[1:])), f"trigger rate not monotone: {rates}")
    plateau = [(KAPPA_GRID[i], KAPPA_GRID[i + 1]) for i in range(len(KAPPA_GRID) - 1)
               if abs(rates[i + 1] - rates[i]) < 0.05 and reds[i] > 0 and reds[i + 1] > 0]
    _require(plateau, f"no kappa plateau with persisting reduction: rates={rates} reductions={reds}")
    bands = [(0, 3), (4, 8), (9, 11)]
    bt = sweep(spec, "layer_band", bands)
    h = bt.column("hallucination_rate")
    _require(h[1] < h[0] and h[1] < h[2], f"middle band not best: {dict(zip(map(str, bands), h))}")
    spans = ", ".join(f"[{a:g}, {b:g}]" for a, b in plateau)
    return f"flat kappa steps {spans}; band halluc shallow/middle/deep={h[0]:.3f}/{h[1]:.3f}/{h[2]:.3f}"


# --- 10: determinism ----------------------------------------------------------------

def check_determinism() -> str:
    from .cli import main
    with tempfile.TemporaryDirectory() as tmp:
        outs = []
        for i in range(2):
            out = Path(tmp) / f"run{i}"
            code = main(["run", "--out", str(out), "--episodes", "20", "--kappa", "1.8", "--alpha", "0.5"])
            _require(code == 0, f"run exited {code}")
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        _require(outs[0] == outs[1], "two identical runs differ")
        _require({"steps.csv", "report.json", "weights.cgvw"} <= set(outs[0]), f"missing outputs: {sorted(outs[0])}")
    return "steps.csv, report.json, weights.cgvw byte-identical"


# --- weights file --------------------------------------------------------------------

def check_weights(path: Optional[str] = None) -> str:
    spec = ScenarioSpec()
    world = build_planted_decoder(spec)
    with tempfile.TemporaryDirectory() as tmp:
        if path is None:
            path = str(Path(tmp) / "planted.cgvw")
            world.weights.save(path)
        try:
            loaded = DecoderWeights.load(path)
        except (GazeGateError, OSError) as exc:
            raise CheckFailure(f"{path}: {exc}") from exc
    _require(loaded.config == world.config, "weights file config differs from the planted build")
    for name in world.weights.array_names():
        _require(np.array_equal(getattr(loaded, name), getattr(world.weights, name)),
                 f"array {name} differs from the planted build")
    eps = make_episodes(spec, 3)
    world = replace(world, weights=loaded)
    caches = init_episodes(eps.images, eps.prompts, loaded, with_aux=False)
    got = forward(loaded, caches.full, loaded.tok_emb[caches.pending_text][:, None, :]).logits
    worst = max(float(np.max(np.abs(got[e] - oracle_step0_logits(world, eps.images[e], eps.prompts[e]))))
                for e in range(len(eps)))
    _require(worst <= 1e-9, f"step-0 logits differ from the brute-force oracle by {worst:.3g}")
    return f"round trip exact; oracle max diff {worst:.1e}"


@dataclass(frozen=True)
class Check:
    id: str
    group: str
    name: str
    fn: Callable
    budget: float


CHECKS = (
    Check("1", "harsanyi", "interaction exactness", check_harsanyi, 1.0),
    Check("2", "harsanyi", "variance gate", check_gate, 1.0),
    Check("3", "intervention", "boost locality and arithmetic", check_locality, 5.0),
    Check("4", "hdi", "head divergence index", check_hdi, 1.0),
    Check("5", "coalitions", "coalition accounting", check_accounting, 5.0),
    Check("6", "noninterference", "non-interference", check_noninterference, 5.0),
    Check("7", "planted", "planted text-inertia effect", check_planted_effect, 120.0),
    Check("8", "planted", "mechanistic direction", check_mechanism, 120.0),
    Check("9", "sweeps", "sweep shapes", check_sweeps, 300.0),
    Check("10", "determinism", "determinism", check_determinism, 10.0),
    Check("weights", "weights", "weights file and oracle", check_weights, 10.0),
)


def select(only: Optional[str]) -> list:
    if not only:
        return list(CHECKS)
    keys = {k.strip() for k in only.split(",") if k.strip()}
    chosen = [c for c in CHECKS if c.id in keys or c.group in keys]
    known = {c.id for c in CHECKS} | {c.group for c in CHECKS}
    unknown = keys - known
    if unknown:
        raise ConfigError(f"unknown check(s): {', '.join(sorted(unknown))}")
    return chosen


def run_check(check: Check, **kw) -> CheckResult:
    t0 = time.perf_counter()
    try:
        detail = check.fn(**kw)
        passed = True
    except CheckFailure as exc:
        detail, passed = str(exc), False
    except Exception as exc:          # a crash is a failed check, reported by name
        detail, passed = f"{type(exc).__name__}: {exc}", False
    dt = time.perf_counter() - t0
    if passed and dt > check.budget:
        passed, detail = False, f"over budget ({dt:.1f}s > {check.budget:g}s); {detail}"
    return CheckResult(check.id, check.group, check.name, passed, detail, dt, check.budget)


def run_checks(only: Optional[str] = None, weights_path: Optional[str] = None) -> list:
    results = []
    for check in select(only):
        kw = {"path": weights_path} if check.id == "weights" else {}
        results.append(run_check(check, **kw))
    return results


def format_table(results) -> str:
    lines = [f"{'id':>7s}  {'result':6s}  {'time':>7s}  check: detail"]
    for r in results:
        lines.append(f"{r.id:>7s}  {'PASS' if r.passed else 'FAIL':6s}  {r.seconds:6.2f}s  {r.name}: {r.detail}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} checks passed")
    return "\n".join(lines)

import math

import numpy as np
import pytest

from gazegate.coalitions import full_forward
from gazegate.decode import DecodePolicy, beam_generate, decode_step, generate, generate_batch, start_batch
from gazegate.exceptions import ConfigError
from gazegate.intervention import InterventionPlan, apply_to_layers


def _run(world, episodes, policy, n=None):
    n = n or len(episodes)
    return generate_batch(world.weights, episodes.images[:n], episodes.prompts[:n], policy,
                          seeds=episodes.seeds[:n], token_class=world.token_class)


def test_policy_validation():
    for bad in ({"strategy": "top_k"}, {"beam_width": 0}, {"max_new_tokens": 0}, {"k": 1},
                {"top_p": 0.0}, {"gate": "oracle"}):
        with pytest.raises(ConfigError):
            DecodePolicy(**bad)


def test_deterministic(world, episodes):
    a = _run(world, episodes, DecodePolicy(), 4)
    b = _run(world, episodes, DecodePolicy(), 4)
    assert [r.tokens for r in a] == [r.tokens for r in b]
    assert [[t.D for t in r.traces] for r in a] == [[t.D for t in r.traces] for r in b]


def test_batched_equals_single(world, episodes):
    batch = _run(world, episodes, DecodePolicy(), 3)
    for e in range(3):
        one = generate(world.weights, episodes.images[e], episodes.prompts[e], DecodePolicy(),
                       seed=int(episodes.seeds[e]), token_class=world.token_class)
        assert one.tokens == batch[e].tokens


def test_forward_accounting(world, episodes):
    for r in _run(world, episodes, DecodePolicy(), 5):
        assert r.vision_encodes == 1
        assert r.total_forwards == 4 * r.steps + sum(t.beta for t in r.traces)
        assert all(t.fwd_count == 4 + t.beta for t in r.traces)


@pytest.mark.parametrize("override", [{"kappa": math.inf}, {"alpha": 0.0}])
def test_non_interference(world, episodes, override):
    base = _run(world, episodes, DecodePolicy(gate="none"))
    other = _run(world, episodes, DecodePolicy(**override))
    assert [r.tokens for r in other] == [r.tokens for r in base]


def test_static_fires_every_step(world, episodes):
    for r in _run(world, episodes, DecodePolicy(kappa=-1.0), 2):
        assert all(t.beta == 1 for t in r.traces)


def test_triggers_at_content_steps(world, episodes):
    traces = [t for r in _run(world, episodes, DecodePolicy(), 6) for t in r.traces]
    fired = [t for t in traces if t.beta]
    assert fired and all(t.prev_class == "function" for t in fired)


@pytest.mark.parametrize("persist", [True, False])
def test_committed_state_matches_rerun(world, episodes, persist):
    policy = DecodePolicy(persist=persist)
    state = start_batch(world.weights, episodes.images[:2], episodes.prompts[:2], policy,
                        seeds=episodes.seeds[:2], token_class=world.token_class)
    checkpoint = state.caches.take([0, 1])
    n0 = state.caches.committed_length
    _, traces = decode_step(state, policy)
    assert traces[0].beta == 1
    cfg = world.config
    hook = apply_to_layers(InterventionPlan(1, policy.alpha, None, cfg.layer_band), cfg.n_layers,
                           cfg.n_visual_slots)
    ref = full_forward(checkpoint, hook=hook if persist else None)
    assert np.array_equal(state.caches.full.k[:, :, :, n0], ref.k_new[:, :, :, 0])


def test_generate_rejects_zero_tokens(world, episodes):
    with pytest.raises(ConfigError):
        generate(world.weights, episodes.images[0], episodes.prompts[0], DecodePolicy(max_new_tokens=0))


def test_end_token_stops(small_weights):
    cfg = small_weights.config
    arrays = {n: np.array(getattr(small_weights, n)) for n in small_weights.array_names()}
    arrays["w_u"][:, cfg.end_token] += 50.0 * np.sign(arrays["w_u"][:, cfg.end_token] + 1e-9)
    from gazegate.decoder import DecoderWeights
    w = DecoderWeights(**arrays, config=cfg)
    img = np.random.default_rng(0).uniform(-1, 1, (cfg.n_visual_slots, cfg.d_model))
    r = generate(w, img, [1, 3], DecodePolicy(strategy="greedy", max_new_tokens=8, k=4))
    assert r.tokens[-1] == cfg.end_token and r.steps < 8


def test_beam_width_one_is_greedy(world, episodes):
    greedy = _run(world, episodes, DecodePolicy(strategy="greedy"), 3)
    beam = _run(world, episodes, DecodePolicy(strategy="beam", beam_width=1), 3)
    assert [r.tokens for r in beam] == [r.tokens for r in greedy]
    assert [r.total_forwards for r in beam] == [r.total_forwards for r in greedy]


def test_beam_cg_not_worse(world, episodes):
    from gazegate.harness import hallucination_rate, score_episodes
    rates = []
    for gate in ("none", "cds"):
        reps = _run(world, episodes, DecodePolicy(strategy="beam", beam_width=4, gate=gate), 6)
        score_episodes(reps, episodes.truth[:6])
        rates.append(hallucination_rate(reps))
    assert rates[1] <= rates[0]


def test_beam_hypotheses_isolated(small_weights):
    cfg = small_weights.config
    img = np.random.default_rng(1).uniform(-1, 1, (cfg.n_visual_slots, cfg.d_model))
    pol = DecodePolicy(strategy="beam", beam_width=3, max_new_tokens=5, k=4)
    a = beam_generate(small_weights, img, [1, 4, 5], pol)
    b = beam_generate(small_weights, img, [1, 4, 5], pol)
    assert a.tokens == b.tokens and len(a.tokens) == 5
    assert a.extra["beam_score"] == b.extra["beam_score"]


def test_empty_band_is_baseline(world, episodes):
    base = _run(world, episodes, DecodePolicy(gate="none"), 4)
    empty = _run(world, episodes, DecodePolicy(layer_band=()), 4)
    assert [r.tokens for r in empty] == [r.tokens for r in base]
    assert any(t.beta for r in empty for t in r.traces)

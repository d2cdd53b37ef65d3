import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazegate.exceptions import ConfigError, InsufficientCandidatesError, NumericDomainError
from gazegate.sensor import harsanyi_interaction, interaction_variance, sense, sense_batch, sweep_kappa, top_k


def test_interaction_value():
    assert harsanyi_interaction(5.0, 2.0, 1.5, 0.5) == 2.0
    assert harsanyi_interaction(1.0, 1.0, 1.0, 1.0) == 0.0


def test_interaction_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        harsanyi_interaction(np.inf, 0, 0, 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_additive_logits_have_no_interaction(parts):
    a, v, t = parts
    assert abs(harsanyi_interaction(a + v + t, a + v, a + t, a)) < 1e-9


def test_top_k_ties_go_to_lower_index():
    c = top_k(np.array([1.0, 3.0, 3.0, 0.0]), 3)
    assert c.tokens.tolist() == [1, 2, 0]
    with pytest.raises(InsufficientCandidatesError):
        top_k(np.zeros(4), 1)
    with pytest.raises(InsufficientCandidatesError):
        top_k(np.zeros(4), 5)


def test_gate_is_strict():
    cand = top_k(np.array([3.0, 0.0]), 2)
    zeros = np.zeros(2)
    assert sense(cand, [3.0, 0.0], zeros, zeros, zeros, 1.8).beta == 1
    rec = sense(cand, [3.0, 0.0], zeros, zeros, zeros, 2.25)
    assert rec.D == 2.25 and rec.beta == 0


def test_infinite_kappa_never_fires():
    cand = top_k(np.array([30.0, 0.0]), 2)
    zeros = np.zeros(2)
    assert sense(cand, [30.0, 0.0], zeros, zeros, zeros, np.inf).beta == 0
    assert sense(cand, [0.0, 0.0], zeros, zeros, zeros, -1.0).beta == 1


def test_batch_matches_single():
    rng = np.random.default_rng(0)
    L = rng.normal(size=(4, 3, 10))
    cand = top_k(L[0], 5).tokens
    _, D, beta = sense_batch(cand, *L, kappa=0.5)
    for b in range(3):
        rec = sense(top_k(L[0, b], 5), *(L[i, b] for i in range(4)), kappa=0.5)
        assert rec.D == pytest.approx(D[b], abs=0) and rec.beta == beta[b]


@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.lists(st.floats(-5, 200), min_size=2, max_size=10))
def test_trigger_rate_monotone(D, grid):
    rates = sweep_kappa(D, sorted(grid))
    assert np.all(np.diff(rates) <= 0)


def test_sweep_rejects_empty():
    with pytest.raises(ConfigError):
        sweep_kappa([], [1.0])
    with pytest.raises(InsufficientCandidatesError):
        interaction_variance([1.0])

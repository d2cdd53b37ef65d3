import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gazegate.exceptions import InsufficientCandidatesError, NumericDomainError
from gazegate.numerics import (kl_divergence, make_rng, matmul, nucleus_filter, sample_categorical,
                               softmax_row, variance)

finite = st.floats(-50, 50, allow_nan=False)


def test_softmax_examples():
    assert np.allclose(softmax_row([0, 0]), [0.5, 0.5])
    p = softmax_row([1000.0, 0.0])
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0)
    assert np.allclose(softmax_row([0.55, -0.05]), [0.6457, 0.3543], atol=1e-4)


@pytest.mark.parametrize("bad", [[], [np.nan, 1.0], [np.inf, 0.0]])
def test_softmax_rejects(bad):
    with pytest.raises(NumericDomainError):
        softmax_row(bad)


@given(arrays(np.float64, st.integers(1, 20), elements=finite))
def test_softmax_is_distribution(x):
    p = softmax_row(x)
    assert abs(p.sum() - 1) < 1e-9
    assert (p > 0).all()


def test_variance_examples():
    assert variance([2.0, 2.0, 2.0]) == 0.0
    assert variance([0.0, 3.0]) == 2.25
    assert variance([1, 2, 3, 4]) == 1.25
    with pytest.raises(InsufficientCandidatesError):
        variance([1.0])


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.9, 0.1]) == pytest.approx(0.51083, abs=1e-5)
    assert kl_divergence([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.36806, abs=1e-5)
    assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == 0.0


@pytest.mark.parametrize("p,q", [([0.5, 0.5], [1.0]), ([0.5, 0.6], [0.5, 0.5]), ([1.0, 0.0], [1.0, 0.0])])
def test_kl_rejects(p, q):
    with pytest.raises(NumericDomainError):
        kl_divergence(p, q)


@given(st.integers(2, 10), st.integers(0, 10_000))
def test_kl_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    assert kl_divergence(p, q) >= 0


def test_matmul_rows_do_not_depend_on_batch():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(37, 32)), rng.normal(size=(32, 32))
    full = matmul(x, w)
    for i in (0, 5, 36):
        assert np.array_equal(matmul(x[i:i + 1], w)[0], full[i])


def test_nucleus_keeps_smallest_prefix():
    p = np.array([0.1, 0.5, 0.3, 0.1])
    out = nucleus_filter(p, top_p=0.8)
    assert np.flatnonzero(out).tolist() == [1, 2]
    assert out.sum() == pytest.approx(1.0)
    assert np.allclose(nucleus_filter(p, 1.0), p)
    with pytest.raises(NumericDomainError):
        nucleus_filter(p, top_p=0.0)


def test_sampling_is_seeded_and_respects_nucleus():
    p = np.array([0.05, 0.6, 0.3, 0.05])
    a = [sample_categorical(p, make_rng(9), top_p=0.85) for _ in range(3)]
    b = [sample_categorical(p, make_rng(9), top_p=0.85) for _ in range(3)]
    assert a == b
    rng = make_rng(1)
    draws = {sample_categorical(p, rng, top_p=0.85) for _ in range(300)}
    assert draws == {1, 2}


def test_sampling_frequencies():
    p = np.array([0.2, 0.8])
    rng = make_rng(4)
    hits = sum(sample_categorical(p, rng) for _ in range(4000))
    assert abs(hits / 4000 - 0.8) < 0.03


def test_temperature_sharpens():
    p = np.array([0.25, 0.75])
    cold = nucleus_filter(p, temperature=0.5)
    assert cold[1] == pytest.approx(0.9)

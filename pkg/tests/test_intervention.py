import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazegate.decoder import KvCache, forward
from gazegate.exceptions import ConfigError, ShapeError
from gazegate.intervention import InterventionPlan, apply_to_layers, fci_boost


def test_worked_example():
    out = fci_boost(np.array([[0.4], [-0.2]]), InterventionPlan(1, 0.5, [0], None))
    assert np.max(np.abs(out[:, 0] - [0.55, -0.05])) <= 1e-12


def test_statistics():
    s = np.array([[1.0, 5.0], [-3.0, 5.0], [2.0, 5.0]])
    plan = lambda stat: InterventionPlan(1, 1.0, [0], None, stat)
    assert fci_boost(s, plan("mean_abs"))[0, 0] == pytest.approx(1.0 + 2.0)
    assert fci_boost(s, plan("median_abs"))[0, 0] == pytest.approx(1.0 + 2.0)
    assert fci_boost(s, plan("max_abs"))[0, 0] == pytest.approx(1.0 + 3.0)
    assert np.array_equal(fci_boost(s, plan("max_abs"))[:, 1], s[:, 1])


def test_identity_cases():
    s = np.random.default_rng(0).normal(size=(4, 9))
    assert np.array_equal(fci_boost(s, InterventionPlan(0, 0.5, slice(0, 4))), s)
    assert np.array_equal(fci_boost(s, InterventionPlan(1, 0.0, slice(0, 4))), s)


def test_per_row_beta():
    s = np.ones((2, 2, 3))
    out = fci_boost(s, InterventionPlan(np.array([1, 0]), 1.0, [0]))
    assert out[0, 0, 0] == 2.0 and out[1, 0, 0] == 1.0
    with pytest.raises(ShapeError):
        fci_boost(np.ones((2, 3)), InterventionPlan(np.array([1, 0]), 1.0, [0]))


@given(st.integers(0, 1000))
def test_boost_is_nonnegative_and_local(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=(3, 8))
    out = fci_boost(s, InterventionPlan(1, 0.7, slice(0, 5)))
    assert np.all(out[:, :5] >= s[:, :5])
    assert np.array_equal(out[:, 5:], s[:, 5:])


def test_plan_validation(small_cfg):
    with pytest.raises(ConfigError):
        InterventionPlan(alpha=-1.0)
    with pytest.raises(ConfigError):
        InterventionPlan(statistic="mode")
    with pytest.raises(ConfigError):
        apply_to_layers(InterventionPlan(layer_band=(2, 9)), small_cfg.n_layers, small_cfg.n_visual_slots)


def test_changed_indices_exact(small_cfg, small_weights):
    x = np.random.default_rng(2).uniform(-1, 1, (1, small_cfg.n_visual_slots + 3, small_cfg.d_model))
    hook = apply_to_layers(InterventionPlan(1, 0.5, None, small_cfg.layer_band), small_cfg.n_layers,
                           small_cfg.n_visual_slots)
    seen = {}

    def spy(l, s):
        o = hook(l, s)
        seen[l] = set(zip(*np.nonzero(o[0] != s[0])))
        return o

    base = forward(small_weights, KvCache(small_cfg, 1), x)
    intv = forward(small_weights, KvCache(small_cfg, 1), x, hook=spy)
    nv, H = small_cfg.n_visual_slots, small_cfg.n_heads
    for l in range(small_cfg.n_layers):
        expect = {(h, j) for h in range(H) for j in range(nv)} if l in (1, 2) else set()
        assert seen[l] == expect
    assert np.array_equal(base.pre_softmax[:, 0], intv.pre_softmax[:, 0])
    assert not np.array_equal(base.logits, intv.logits)
    assert np.array_equal(base.k_new[..., :-1, :], intv.k_new[..., :-1, :])


@given(st.integers(0, 1000))
def test_visual_mass_never_drops(seed):
    from gazegate.numerics import softmax
    rng = np.random.default_rng(seed)
    s = rng.normal(scale=3, size=(4, 10))
    out = fci_boost(s, InterventionPlan(1, float(rng.uniform(0.01, 2)), slice(0, 6)))
    assert np.all(softmax(out)[:, :6].sum(-1) >= softmax(s)[:, :6].sum(-1) - 1e-12)
    # the added term is the same for every head
    d = out[:, :6] - s[:, :6]
    assert np.allclose(d, d[0])

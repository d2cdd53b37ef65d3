import sys

import numpy as np
import pytest

from gazegate.decoder import DecoderConfig, DecoderWeights
from gazegate.harness import ScenarioSpec, build_planted_decoder, make_episodes


@pytest.fixture(scope="session")
def small_cfg():
    return DecoderConfig(n_layers=4, n_heads=2, d_model=8, vocab_size=12, n_visual_slots=4,
                         max_seq=20, layer_band=(1, 2))


@pytest.fixture(scope="session")
def small_weights(small_cfg):
    return DecoderWeights.random(small_cfg, seed=3, drift=0.2)


@pytest.fixture
def small_inputs(small_cfg):
    rng = np.random.default_rng(7)
    images = rng.uniform(-1, 1, (3, small_cfg.n_visual_slots, small_cfg.d_model))
    prompts = rng.integers(3, small_cfg.vocab_size, (3, 3))
    return images, prompts


@pytest.fixture(scope="session")
def spec():
    return ScenarioSpec(episodes=12)


@pytest.fixture(scope="session")
def world(spec):
    return build_planted_decoder(spec)


@pytest.fixture(scope="session")
def episodes(spec):
    return make_episodes(spec)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    rows = getattr(mod, "RESULTS", None)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for r in rows:
        terminalreporter.write_line(f"check {r.id:>7s}: {'PASS' if r.passed else 'FAIL'}  "
                                    f"{r.seconds:7.2f}s / {r.budget:g}s  {r.name}: {r.detail}")

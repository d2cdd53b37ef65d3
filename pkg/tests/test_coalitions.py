import numpy as np
import pytest

from gazegate.coalitions import (Coalition, append_committed_token, auxiliary_logits,
                                 auxiliary_logits_sequential, full_forward, init_episode, init_episodes,
                                 set_full_pending)
from gazegate.exceptions import ConfigError, ShapeError


def test_init_layout(small_weights, small_inputs):
    images, prompts = small_inputs
    c = init_episodes(images, prompts, small_weights)
    nv = small_weights.config.n_visual_slots
    assert c.committed_length == nv + prompts.shape[1] - 1
    assert c.seq_len == nv + prompts.shape[1]
    assert set(c.lengths().values()) == {c.committed_length}
    assert c.vision_encodes.tolist() == [1, 1, 1]
    assert c.pending_tokens(Coalition.V_ONLY).tolist() == [0, 0, 0]
    assert np.array_equal(c.pending_tokens(Coalition.T_ONLY), prompts[:, -1])


def test_batched_aux_equals_sequential(small_weights, small_inputs):
    c = init_episodes(*small_inputs, small_weights)
    seq = auxiliary_logits_sequential(c)
    assert np.array_equal(auxiliary_logits(c), seq)


def test_masked_conditions_ignore_masked_inputs(small_weights, small_inputs):
    images, prompts = small_inputs
    other_img = images[::-1].copy()
    other_txt = (prompts + 1) % small_weights.config.vocab_size
    a = auxiliary_logits(init_episodes(images, prompts, small_weights))
    b = auxiliary_logits(init_episodes(other_img, prompts, small_weights))
    c = auxiliary_logits(init_episodes(images, np.where(prompts > 0, other_txt, 1), small_weights))
    v, t, none = 0, 1, 2
    assert np.array_equal(a[t], b[t]) and np.array_equal(a[none], b[none])
    assert np.array_equal(a[v], c[v]) and np.array_equal(a[none], c[none])


def test_commit_advances_all_conditions(small_weights, small_inputs):
    c = init_episodes(*small_inputs, small_weights)
    n = c.committed_length
    with pytest.raises(ShapeError):
        append_committed_token(c, [1, 1, 1])
    set_full_pending(c, full_forward(c))
    auxiliary_logits(c)
    append_committed_token(c, [4, 5, 6])
    assert set(c.lengths().values()) == {n + 1}
    assert c.pending_text.tolist() == [4, 5, 6]
    assert c.forwards.sum(axis=1).tolist() == [4, 4, 4]


def test_take_is_independent(small_weights, small_inputs):
    c = init_episodes(*small_inputs, small_weights)
    sub = c.take([2])
    assert np.array_equal(auxiliary_logits(sub)[:, 0], auxiliary_logits_sequential(c)[:, 2])
    sub.full.k[...] = 0
    assert np.any(c.full.k != 0)


def test_unpadded_system_prompt_keeps_first_token(small_weights, small_inputs):
    images, prompts = small_inputs
    padded = auxiliary_logits(init_episodes(images, prompts, small_weights))
    kept = auxiliary_logits(init_episodes(images, prompts, small_weights, pad_system_prompt=False))
    assert not np.array_equal(padded[0], kept[0])


def test_init_errors(small_weights, small_inputs):
    images, prompts = small_inputs
    with pytest.raises(ShapeError):
        init_episodes(images[:2], prompts, small_weights)
    with pytest.raises(ConfigError):
        init_episodes(images, prompts + 100, small_weights)
    one = init_episode(images[0], prompts[0], small_weights)
    assert one.n_episodes == 1

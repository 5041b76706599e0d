"""Unit tests for the host transformer: forward/decode parity, causality, attention primitives."""

from dataclasses import replace

import numpy as np
import pytest

from app.errors import CapacityError, PreconditionError, SequenceLengthError, TokenIndexError
from core.model.transformer import TransformerLM, VanillaCaches, attend, project_qkv
from core.numerics.tensor import Tensor
from tests.helpers import tiny_model_config

pytestmark = pytest.mark.unit


def _tokens(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=n)


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"position_scheme": "rotary"},
        {"gqa_groups": 2},
        {"exclude_dim0": True},
        {"dmc_enabled": True},
    ],
    ids=["absolute", "rotary", "gqa", "exclude-dim0", "dmc-flag"],
)
def test_forward_matches_sequential_decode(overrides):
    config = tiny_model_config(**overrides)
    model = TransformerLM(config, seed=5)
    tokens = _tokens(12)
    parallel = model.forward_lm(tokens).data
    sequential = model.decode_sequence(tokens)
    np.testing.assert_allclose(sequential, parallel, atol=1e-10, rtol=0)


def test_forward_batch_shape(model):
    tokens = np.stack([_tokens(7, 1), _tokens(7, 2)])
    assert model.forward_lm(tokens).shape == (2, 7, 256)
    assert model.forward_lm(tokens[0]).shape == (7, 256)


@pytest.mark.parametrize("scheme", ["absolute", "rotary"])
def test_causality_check_is_bit_exact(scheme):
    model = TransformerLM(tiny_model_config(position_scheme=scheme), seed=2)
    tokens = _tokens(10, 3)
    base = model.forward_lm(tokens).data
    for j in (3, 9):
        perturbed = tokens.copy()
        perturbed[j] = (perturbed[j] + 17) % 256
        changed = model.forward_lm(perturbed).data
        assert np.array_equal(changed[:j], base[:j])
        assert not np.array_equal(changed[j], base[j])


def test_single_token_forward_equals_first_decode(model):
    token = np.array([42])
    parallel = model.forward_lm(token).data[0]
    caches = model.new_caches()
    decoded = model.decode_step(42, caches)
    np.testing.assert_allclose(decoded, parallel, atol=1e-12, rtol=0)
    assert caches.position == 1


def test_decode_cache_grows_one_slot_per_token(model):
    caches = model.new_caches()
    model.decode_sequence(_tokens(9), caches)
    assert caches.lengths() == [[9, 9], [9, 9]]
    assert caches.position == 9


def test_gqa_caches_one_slot_list_per_kv_head():
    config = tiny_model_config(n_heads=4, gqa_groups=2)
    caches = VanillaCaches(config)
    TransformerLM(config, seed=1).decode_sequence(_tokens(4), caches)
    assert caches.lengths() == [[4, 4], [4, 4]]


def test_decode_refuses_past_max_seq():
    model = TransformerLM(tiny_model_config(max_seq=4), seed=0)
    caches = model.new_caches()
    model.decode_sequence(_tokens(4), caches)
    with pytest.raises(CapacityError):
        model.decode_step(1, caches)


def test_forward_refuses_sequences_longer_than_max_seq():
    model = TransformerLM(tiny_model_config(max_seq=8), seed=0)
    with pytest.raises(SequenceLengthError):
        model.forward_lm(_tokens(9))


def test_decode_rejects_out_of_vocabulary_token(model):
    with pytest.raises(TokenIndexError):
        model.decode_step(256, model.new_caches())


def test_project_qkv_with_identity_weights(model):
    lw = model.layer(0)
    eye = np.stack([np.eye(8)] * 2)
    lw = replace(lw, wq=Tensor(eye), wk=Tensor(eye), wv=Tensor(eye))
    x = np.zeros(16)
    x[0] = 1.0
    q, k, v = project_qkv(x, lw, head=0)
    e1 = np.eye(8)[0]
    assert q.tolist() == e1.tolist()
    assert k.tolist() == e1.tolist()
    assert v.tolist() == e1.tolist()
    q1, _, _ = project_qkv(x, lw, head=1)
    assert not q1.any()


def test_attend_single_slot_returns_its_value():
    rng = np.random.default_rng(0)
    q, k, v = rng.normal(size=(3, 8))
    out = attend(q, (k[None, :], v[None, :]))
    assert np.array_equal(out, v)


def test_attend_identical_keys_average_values():
    rng = np.random.default_rng(1)
    q, k = rng.normal(size=(2, 8))
    v1, v2 = rng.normal(size=(2, 8))
    out = attend(q, (np.stack([k, k]), np.stack([v1, v2])))
    np.testing.assert_allclose(out, (v1 + v2) / 2, rtol=1e-12, atol=1e-12)


def test_attend_exclude_dim0_ignores_first_neuron():
    rng = np.random.default_rng(2)
    q = rng.normal(size=8)
    keys = rng.normal(size=(4, 8))
    values = rng.normal(size=(4, 8))
    moved = keys.copy()
    moved[:, 0] += 100.0
    a = attend(q, (keys, values), exclude_dim0=True)
    b = attend(q, (moved, values), exclude_dim0=True)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    scores = keys[:, 1:] @ q[1:] / np.sqrt(8)
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    np.testing.assert_allclose(a, weights @ values, rtol=1e-12, atol=1e-12)


def test_attend_on_empty_cache_raises():
    with pytest.raises(PreconditionError):
        attend(np.ones(4), (np.empty((0, 4)), np.empty((0, 4))))


def test_dim0_scale_zero_matches_exclusion(model_config):
    config = model_config.model_copy(update={"exclude_dim0": True})
    model = TransformerLM(config, seed=4)
    plain = TransformerLM(model_config, params=model.params)
    tokens = _tokens(6)
    excluded = model.forward_lm(tokens).data
    scaled = plain.forward_lm(tokens, attention=plain.vanilla_attention(dim0_scale=0.0)).data
    np.testing.assert_allclose(scaled, excluded, atol=1e-12, rtol=0)

"""The unrolled training path and the decode-time cache must agree on discrete decisions."""

import numpy as np
import pytest

from core.baselines.pooling import fixed_pool_decisions
from core.dmc.inference import DMCCaches
from core.dmc.training import DMCAttention
from core.dtos import DMCConfig, GumbelParams
from core.model.transformer import TransformerLM
from tests.helpers import tiny_model_config

pytestmark = pytest.mark.unit


def _hard_dmc(config) -> DMCConfig:
    return DMCConfig(gumbel=GumbelParams(c=config.decision_offset), window=None)


def _model(seed: int, **overrides) -> TransformerLM:
    config = tiny_model_config(dmc_enabled=True, decision_offset=0.0, **overrides)
    return TransformerLM(config, seed=seed)


def _check_parity(model: TransformerLM, tokens: np.ndarray, *, scripted=None) -> None:
    cfg = model.config
    n = len(tokens)
    attention = DMCAttention(
        cfg,
        _hard_dmc(cfg),
        hard=scripted is None,
        scripted_alpha=None if scripted is None else scripted[:, None],
        record_outputs=True,
    )
    parallel = model.forward_lm(tokens, attention=attention).data

    caches = DMCCaches(cfg, scripted_alpha=scripted, record_outputs=True)
    sequential = model.decode_sequence(tokens, caches)

    for layer in range(cfg.n_layers):
        train_out = attention.outputs[layer][0].transpose(1, 0, 2)
        infer_out = np.stack(caches.outputs[layer])
        assert infer_out.shape == (n, cfg.n_heads, cfg.head_dim)
        np.testing.assert_allclose(infer_out, train_out, atol=1e-8, rtol=0)
    np.testing.assert_allclose(sequential, parallel, atol=1e-8, rtol=0)


@pytest.mark.parametrize("seed", range(20))
def test_model_decisions_agree(seed):
    model = _model(seed)
    tokens = np.random.default_rng(seed).integers(0, 256, size=16)
    _check_parity(model, tokens)


@pytest.mark.parametrize("seed", range(10))
def test_scripted_decisions_agree(seed):
    model = _model(100 + seed)
    cfg = model.config
    rng = np.random.default_rng(seed)
    n = 14
    scripted = rng.integers(0, 2, size=(cfg.n_layers, cfg.n_heads, n))
    _check_parity(model, rng.integers(0, 256, size=n), scripted=scripted)


def test_rotary_model_agrees():
    model = _model(7, position_scheme="rotary")
    _check_parity(model, np.arange(3, 15))


def test_fixed_pool_decisions_agree():
    model = _model(3)
    cfg = model.config
    alpha, _ = fixed_pool_decisions(12, 3)
    scripted = np.broadcast_to(alpha, (cfg.n_layers, cfg.n_heads, 12))
    _check_parity(model, np.arange(12), scripted=scripted)


def test_mixed_decisions_actually_occur():
    """Guard against a parity check that never merges anything."""
    model = _model(0)
    caches = DMCCaches(model.config)
    model.decode_sequence(np.random.default_rng(0).integers(0, 256, size=16), caches)
    lengths = np.array(caches.lengths())
    assert np.all(lengths < 16)
    assert np.all(lengths > 1)


@pytest.mark.acceptance
@pytest.mark.parametrize("seed", range(200))
def test_model_decisions_agree_many_seeds(seed):
    model = _model(1000 + seed)
    _check_parity(model, np.random.default_rng(seed).integers(0, 256, size=32))

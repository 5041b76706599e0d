"""Unit tests for perplexity evaluation across cache modes."""

import math

import numpy as np
import pytest

from app.errors import DataError, PreconditionError
from core.enums import BaselineKind, EvalMode
from core.model.checkpoint import snapshot
from core.model.transformer import TransformerLM
from core.numerics.tensor import Tensor
from core.services.eval_service import eval_perplexity, inference_dmc_config, token_nll

pytestmark = pytest.mark.unit

SEQ = 12


@pytest.fixture
def tokens() -> np.ndarray:
    return np.random.default_rng(4).integers(0, 256, size=4 * SEQ + 1)


def test_token_nll_of_uniform_logits():
    assert token_nll(np.zeros((3, 4)), np.array([0, 1, 2])) == pytest.approx(3 * math.log(4))


def test_zero_output_head_gives_vocabulary_perplexity(model, tokens):
    params = dict(model.params)
    params["lm_head"] = Tensor(np.zeros_like(params["lm_head"].data), name="lm_head")
    flat = TransformerLM(model.config, params)
    result = eval_perplexity(flat, tokens, "vanilla", seq_len=SEQ)
    assert result.perplexity == pytest.approx(256.0, rel=1e-12)
    assert result.n_tokens == 4 * SEQ
    assert result.achieved_cr is None


def test_decode_and_parallel_vanilla_agree(model, tokens):
    parallel = eval_perplexity(model, tokens, "vanilla", seq_len=SEQ, batch_size=3)
    stepwise = eval_perplexity(model, tokens, "h2o", seq_len=SEQ, cr=1.0)
    assert stepwise.loss == pytest.approx(parallel.loss, rel=1e-10)


def test_dmc_train_and_infer_paths_agree(dmc_model, tokens):
    train = eval_perplexity(dmc_model, tokens, EvalMode.DMC_TRAIN_PATH, seq_len=SEQ)
    infer = eval_perplexity(dmc_model, tokens, EvalMode.DMC_INFER_PATH, seq_len=SEQ)
    assert abs(train.perplexity - infer.perplexity) / infer.perplexity < 1e-3
    assert train.achieved_cr == pytest.approx(infer.achieved_cr)
    assert infer.achieved_cr >= 1.0


def test_fixed_pool_reaches_its_width(dmc_model, tokens):
    result = eval_perplexity(dmc_model, tokens, "fixed-pool", seq_len=SEQ, pool_width=2)
    assert result.achieved_cr == 2.0
    by_cr = eval_perplexity(dmc_model, tokens, "fixed-pool", seq_len=SEQ, cr=3.0)
    assert by_cr.achieved_cr == 3.0


def test_pool_width_comes_from_the_checkpoint(dmc_model, tokens):
    checkpoint = snapshot(dmc_model, baseline=BaselineKind.FIXED_POOL, pool_width=4)
    result = eval_perplexity(checkpoint, tokens, "fixed-pool", seq_len=SEQ, max_windows=2)
    assert result.achieved_cr == 4.0
    assert result.n_tokens == 2 * SEQ


def test_dmc_modes_need_a_dmc_model(model, tokens):
    with pytest.raises(PreconditionError):
        eval_perplexity(model, tokens, "dmc-infer-path", seq_len=SEQ)
    with pytest.raises(PreconditionError):
        eval_perplexity(model, tokens, "dmc-train-path", seq_len=SEQ)


def test_split_too_short_for_a_window(model):
    with pytest.raises(DataError):
        eval_perplexity(model, np.arange(SEQ), "vanilla", seq_len=SEQ)


def test_inference_config_matches_model(dmc_model_config):
    dmc = inference_dmc_config(dmc_model_config, window=3)
    assert dmc.gumbel.c == dmc_model_config.decision_offset
    assert dmc.variant is dmc_model_config.dmc_variant
    assert dmc.window == 3

"""Unit tests for the relaxed training path: sampling, accumulation, mask, auxiliary losses."""

import numpy as np
import pytest

from app.errors import DimensionError, PreconditionError, ScheduleError
from core.dmc.inference import DecisionOutcome, DMCHeadCache, dmc_cache_update
from core.dmc.training import (
    DMCAttention,
    RelaxedDecisions,
    anneal_factor,
    anneal_first_neuron,
    build_dmc_mask,
    combine_losses,
    cr_loss,
    dmc_train_forward,
    gumbel_sigmoid_sample,
    head_consistency_loss,
    partial_accumulate,
    windowed_accumulate,
)
from core.dtos import DMCConfig, GumbelParams
from core.enums import CompressionPrior
from core.model.transformer import TransformerLM
from core.numerics import ops
from core.numerics.gradcheck import gradcheck
from core.numerics.tensor import Tape, Tensor
from tests.helpers import tiny_model_config

pytestmark = pytest.mark.unit


def _decisions(alpha: np.ndarray, valid=None) -> RelaxedDecisions:
    alpha = np.asarray(alpha, dtype=np.float64)
    return RelaxedDecisions(Tensor(alpha), Tensor(np.ones_like(alpha)), valid)


# ---------------------------------------------------------------------------
# Gumbel-sigmoid
# ---------------------------------------------------------------------------


def test_zero_noise_sample_at_offset_is_half():
    params = GumbelParams(tau=0.1, c=5.0)
    out = gumbel_sigmoid_sample(Tensor([5.0]), params, deterministic=True)
    assert out.item() == 0.5


def test_zero_noise_sample_below_offset():
    params = GumbelParams(tau=1.0, c=5.0)
    out = gumbel_sigmoid_sample(Tensor([0.0]), params, deterministic=True)
    assert out.item() == pytest.approx(0.0067, abs=1e-4)


def test_noisy_sample_mean_at_offset_is_half():
    params = GumbelParams(tau=0.1, c=5.0)
    rng = np.random.default_rng(0)
    out = gumbel_sigmoid_sample(Tensor(np.full(100_000, 5.0)), params, rng=rng)
    assert out.data.mean() == pytest.approx(0.5, abs=0.01)
    assert np.all((out.data >= 0.0) & (out.data <= 1.0))


# ---------------------------------------------------------------------------
# Partial accumulation
# ---------------------------------------------------------------------------


def test_partial_accumulate_two_token_example():
    k = Tensor([[1.0, 2.0], [3.0, 6.0]])
    v = Tensor([[0.0, 4.0], [2.0, 0.0]])
    k_bar, v_bar, z = partial_accumulate(k, v, Tensor([0.0, 1.0]), Tensor([0.5, 0.5]))
    np.testing.assert_allclose(k_bar.data[1], [2.0, 4.0])
    np.testing.assert_allclose(v_bar.data[1], [1.0, 2.0])
    assert z.data.tolist() == [0.5, 1.0]
    assert k_bar.data[0].tolist() == [1.0, 2.0]


def test_partial_accumulate_matches_discrete_replay():
    rng = np.random.default_rng(0)
    d = 5
    for _ in range(200):
        n = int(rng.integers(2, 65))
        k = rng.normal(size=(n, d))
        k[:, 0] = 0.0
        v = rng.normal(size=(n, d))
        alpha = rng.integers(0, 2, size=n).astype(np.float64)
        omega = rng.uniform(0.05, 1.0, size=n)
        k_bar, v_bar, _ = partial_accumulate(Tensor(k), Tensor(v), Tensor(alpha), Tensor(omega))

        cache = DMCHeadCache()
        for t in range(n):
            dmc_cache_update(
                cache, np.zeros(d), k[t], v[t], outcome=DecisionOutcome(int(alpha[t]), omega[t])
            )
        finals = [i for i in range(n) if i == n - 1 or alpha[i + 1] == 0]
        np.testing.assert_allclose(cache.keys, k_bar.data[finals], atol=1e-12, rtol=0)
        np.testing.assert_allclose(cache.values, v_bar.data[finals], atol=1e-12, rtol=0)


def test_partial_accumulate_rejects_misaligned_inputs():
    with pytest.raises(DimensionError):
        partial_accumulate(
            Tensor(np.zeros((3, 2))),
            Tensor(np.zeros((3, 2))),
            Tensor(np.zeros(4)),
            Tensor(np.ones(3)),
        )


def test_windowed_all_merge_averages_last_window():
    n, w = 8, 4
    k = Tensor(np.arange(n * 2, dtype=np.float64).reshape(n, 2))
    k_bar, _, z = windowed_accumulate(k, k, Tensor(np.ones(n)), Tensor(np.ones(n)), w)
    np.testing.assert_allclose(k_bar.data[7], k.data[4:8].mean(axis=0), rtol=1e-12)
    assert z.data[7] == 4.0


def test_windowed_with_full_window_is_exact():
    rng = np.random.default_rng(3)
    n = 6
    args = (
        Tensor(rng.normal(size=(n, 3))),
        Tensor(rng.normal(size=(n, 3))),
        Tensor(rng.uniform(size=n)),
        Tensor(rng.uniform(0.1, 1.0, size=n)),
    )
    exact = partial_accumulate(*args)
    windowed = windowed_accumulate(*args, n)
    for a, b in zip(exact, windowed, strict=True):
        assert np.array_equal(a.data, b.data)


def test_windowed_equals_exact_when_segments_fit():
    rng = np.random.default_rng(0)
    for _ in range(500):
        n, w = int(rng.integers(2, 33)), int(rng.integers(1, 9))
        alpha = np.zeros(n)
        t = 0
        while t < n:
            length = int(rng.integers(1, w + 1))
            alpha[t + 1 : t + length] = 1.0
            t += length
        args = (
            Tensor(rng.normal(size=(2, n, 3))),
            Tensor(rng.normal(size=(2, n, 3))),
            Tensor(np.stack([alpha, alpha])),
            Tensor(rng.uniform(0.1, 1.0, size=(2, n))),
        )
        exact = partial_accumulate(*args)
        windowed = windowed_accumulate(*args, w)
        for a, b in zip(exact, windowed, strict=True):
            np.testing.assert_allclose(b.data, a.data, atol=1e-12, rtol=0)


def test_windowed_rejects_empty_window():
    x = Tensor(np.zeros((3, 2)))
    with pytest.raises(PreconditionError):
        windowed_accumulate(x, x, Tensor(np.zeros(3)), Tensor(np.ones(3)), 0)


# ---------------------------------------------------------------------------
# Mask
# ---------------------------------------------------------------------------


def test_mask_without_merges_is_causal():
    mask = build_dmc_mask(Tensor(np.zeros(4))).data
    expected = np.triu(np.full((4, 4), -np.inf), k=1)
    assert np.array_equal(mask, expected)


def test_mask_hides_merged_state():
    alpha = np.zeros(4)
    alpha[2] = 1.0
    mask = build_dmc_mask(Tensor(alpha)).data
    assert mask[2, 1] == -np.inf and mask[3, 1] == -np.inf
    assert mask[1, 1] == 0.0
    assert mask[3, 0] == 0.0 and mask[3, 2] == 0.0


def test_mask_partial_decision_gives_log_weight():
    alpha = np.zeros(4)
    alpha[2] = 0.5
    mask = build_dmc_mask(Tensor(alpha)).data
    assert mask[2, 1] == pytest.approx(np.log(0.5))
    assert mask[3, 1] == pytest.approx(np.log(0.5))


def test_mask_from_relaxed_logits_matches_alpha_form():
    logits = np.array([0.3, -2.0, 0.0, 4.0, 1.5])
    alpha = 1.0 / (1.0 + np.exp(-logits))
    direct = build_dmc_mask(Tensor(alpha)).data
    stable = build_dmc_mask(None, relaxed_logits=Tensor(logits)).data
    np.testing.assert_allclose(stable, direct, rtol=1e-12, atol=1e-15)
    assert stable[3, 1] == pytest.approx(np.log(0.5))


def test_mask_needs_decisions():
    with pytest.raises(PreconditionError):
        build_dmc_mask(None)
    with pytest.raises(DimensionError):
        build_dmc_mask(Tensor(np.zeros(3)), n=5)


# ---------------------------------------------------------------------------
# Auxiliary losses
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "alpha_value, target, expected",
    [(0.0, 2.0, 0.5), (0.0, 1.0, 0.0), (1.0, 2.0, 0.0), (1.0, 4.0, 0.0)],
)
def test_cr_loss_examples(alpha_value, target, expected):
    decisions = _decisions(np.full((2, 3, 2, 8), alpha_value))
    assert cr_loss(decisions, target).item() == pytest.approx(expected, abs=1e-12)


def test_cr_loss_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_layers, batch, heads, n = (int(x) for x in rng.integers(1, 6, size=4))
        alpha = rng.uniform(size=(n_layers, batch, heads, n))
        # a share of the draws are discrete or all-merge, which sit on the hinge edges
        kind = rng.random()
        if kind < 0.2:
            alpha = np.round(alpha)
        elif kind < 0.3:
            alpha = np.ones_like(alpha)
        target = float(rng.uniform(1.0, 6.0))
        n_total = n_layers * heads * n
        kept = (1 - alpha).sum(axis=(0, 2, 3))
        expected = np.mean(np.maximum(0.0, kept - n_total / target) / n_total)
        got = cr_loss(_decisions(alpha), target).item()
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)



def test_cr_loss_local_prior_budgets_each_layer():
    alpha = np.zeros((2, 1, 2, 4))
    alpha[0] = 1.0
    decisions = _decisions(alpha)
    assert cr_loss(decisions, 2.0, prior=CompressionPrior.GLOBAL).item() == 0.0
    local = cr_loss(decisions, 2.0, prior=CompressionPrior.LOCAL).item()
    assert local == pytest.approx((8 - 4) / 16)


def test_cr_loss_respects_padding():
    alpha = np.zeros((1, 1, 1, 4))
    valid = np.array([[True, True, False, False]])
    loss = cr_loss(_decisions(alpha, valid), 2.0).item()
    assert loss == pytest.approx((2 - 1) / 2)


def test_cr_loss_gradient_pushes_towards_merging():
    alpha = Tensor(np.zeros((1, 1, 2, 4)), requires_grad=True)
    with Tape() as tape:
        loss = cr_loss(RelaxedDecisions(alpha, Tensor(np.ones((1, 1, 2, 4)))), 2.0)
    tape.backward(loss)
    np.testing.assert_allclose(alpha.grad, -1.0 / 8)


def test_cr_loss_rejects_ratio_below_one():
    with pytest.raises(PreconditionError):
        cr_loss(_decisions(np.zeros((1, 1, 1, 2))), 0.5)


def test_head_consistency_examples():
    same = _decisions(np.full((1, 1, 3, 4), 0.3))
    assert head_consistency_loss(same).item() == pytest.approx(0.0, abs=1e-15)

    split = _decisions(np.array([[[[0.0], [1.0]]]]))
    # per-layer deviation sum is 1, normalised by 1 layer * 2 heads * 1 position
    assert head_consistency_loss(split).item() == pytest.approx(0.5)


def test_head_consistency_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_layers, batch, heads, n = (int(x) for x in rng.integers(1, 6, size=4))
        alpha = rng.uniform(size=(n_layers, batch, heads, n))
        deviation = np.abs(alpha - alpha.mean(axis=2, keepdims=True)).sum()
        expected = deviation / (n_layers * heads * batch * n)
        got = head_consistency_loss(_decisions(alpha)).item()
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12)



def test_combined_loss_adds_head_term_only_for_consistency_variant():
    decisions = _decisions(np.array([[[[0.0, 1.0], [1.0, 1.0]]]]))
    lm = Tensor(2.0)
    plain = combine_losses(lm, decisions, 2.0, DMCConfig())
    assert plain.head_consistency is None
    assert plain.total.item() == pytest.approx(2.0 + plain.cr.item())

    tied = combine_losses(lm, decisions, 2.0, DMCConfig(variant="dmc-c"))
    assert tied.head_consistency is not None
    assert tied.total.item() == pytest.approx(
        2.0 + tied.cr.item() + tied.head_consistency.item()
    )
    assert set(tied.as_floats()) == {"lm_loss", "cr_loss", "head_loss"}


def test_decision_statistics():
    alpha = np.zeros((1, 1, 2, 4))
    alpha[..., 1::2] = 0.9
    decisions = _decisions(alpha)
    assert decisions.kept_slots().tolist() == [[[2, 2]]]
    assert decisions.achieved_cr() == 2.0
    assert decisions.achieved_cr_per_layer() == [2.0]


# ---------------------------------------------------------------------------
# First-neuron annealing
# ---------------------------------------------------------------------------


def test_anneal_factor_schedule():
    assert anneal_factor(0, 10) == 1.0
    assert anneal_factor(5, 10) == 0.5
    assert anneal_factor(10, 10) == 0.0
    assert anneal_first_neuron(2.0, -4.0, 5, 10) == (1.0, -2.0)


def test_anneal_factor_out_of_range():
    with pytest.raises(ScheduleError):
        anneal_factor(11, 10)
    with pytest.raises(ScheduleError):
        anneal_factor(-1, 10)


# ---------------------------------------------------------------------------
# End-to-end gradients through the DMC attention path
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("window", [None, 3])
@pytest.mark.parametrize("param", ["layers.0.wk", "layers.0.wq"])
def test_dmc_forward_gradients(window, param):
    config = tiny_model_config(
        n_layers=1, d_model=8, dmc_enabled=True, decision_offset=0.0, init_std=0.5
    )
    model = TransformerLM(config, seed=11)
    dmc = DMCConfig(gumbel=GumbelParams(tau=1.0, c=0.0), window=window)
    batch = np.random.default_rng(0).integers(0, 256, size=(1, 9))

    def f(x):
        params = {**model.params, param: x}
        attention = DMCAttention(config, dmc, stochastic=False)
        loss, decisions = dmc_train_forward(model, batch, dmc, attention=attention, params=params)
        return loss + cr_loss(decisions, 2.0)

    assert gradcheck(f, Tensor(model.params[param].data.copy())) < 1e-4


def test_train_forward_requires_dmc_model():
    model = TransformerLM(tiny_model_config(), seed=0)
    with pytest.raises(PreconditionError):
        dmc_train_forward(model, np.zeros((1, 4), dtype=np.int64), DMCConfig())


def test_train_forward_first_decision_is_forced_open(dmc_model):
    dmc = DMCConfig()
    attention = DMCAttention(dmc_model.config, dmc, stochastic=True)
    _, decisions = dmc_train_forward(
        dmc_model, np.arange(10).reshape(1, 10), dmc, attention=attention
    )
    assert decisions.alpha.shape == (2, 1, 2, 9)
    assert np.all(decisions.alpha.data[..., 0] == 0.0)
    assert np.all((decisions.omega.data > 0) & (decisions.omega.data <= 1))


def test_fresh_retrofit_starts_like_the_dim0_blind_model():
    config = tiny_model_config(dmc_enabled=True, init_std=0.02)
    model = TransformerLM(config, seed=4)
    dmc = DMCConfig(gumbel=GumbelParams(c=5.0))
    batch = np.random.default_rng(4).integers(0, 256, size=(4, 33))
    attention = DMCAttention(config, dmc, rng=np.random.default_rng(0))
    loss, decisions = dmc_train_forward(model, batch, dmc, attention=attention)
    assert decisions.alpha.data.mean() < 0.05

    blind = model.forward_lm(batch[:, :-1], attention=model.vanilla_attention(dim0_scale=0.0))
    baseline = ops.cross_entropy_lm(blind, batch[:, 1:])
    assert loss.item() == pytest.approx(baseline.item(), rel=0.01)


def test_uniform_weighting_variant_uses_unit_importance():
    config = tiny_model_config(dmc_enabled=True, dmc_variant="uniform")
    model = TransformerLM(config, seed=2)
    dmc = DMCConfig(variant="uniform")
    _, decisions = dmc_train_forward(model, np.arange(7).reshape(1, 7), dmc)
    assert np.all(decisions.omega.data == 1.0)


@pytest.mark.parametrize("stochastic", [False, True])
def test_shared_decisions_variant_ties_heads(stochastic):
    config = tiny_model_config(dmc_enabled=True, dmc_variant="dmc-hardc")
    model = TransformerLM(config, seed=2)
    dmc = DMCConfig(variant="dmc-hardc")
    attention = DMCAttention(config, dmc, rng=np.random.default_rng(0), stochastic=stochastic)
    tokens = np.arange(14).reshape(2, 7)
    _, decisions = dmc_train_forward(model, tokens, dmc, attention=attention)
    alpha = decisions.alpha.data
    for head in range(1, config.n_heads):
        assert np.array_equal(alpha[:, :, 0], alpha[:, :, head])
    # the two sequences still get their own noise
    if stochastic:
        assert not np.array_equal(alpha[:, 0], alpha[:, 1])


def test_ops_mask_and_training_mask_agree():
    alpha = np.array([0.0, 0.2, 0.7, 0.1])
    via_training = build_dmc_mask(Tensor(alpha)).data
    via_ops = ops.dmc_additive_mask(ops.shift(ops.log1m(Tensor(alpha)), -1)).data
    assert np.array_equal(via_training, via_ops)

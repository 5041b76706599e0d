"""Unit tests for the H2O and TOVA eviction baselines."""

import logging

import numpy as np
import pytest

from app.errors import DimensionError, PreconditionError
from core.baselines.eviction import (
    EvictionCaches,
    EvictionState,
    eviction_budget,
    h2o_evict,
    tova_evict,
)
from core.enums import EvictionPolicy
from core.model.transformer import VanillaCaches

pytestmark = pytest.mark.unit


def _state(policy: EvictionPolicy, budget: int, n: int) -> EvictionState:
    state = EvictionState(policy, budget)
    for position in range(n):
        state.admit(position)
    return state


@pytest.mark.parametrize(
    "cr, n, generated, expected",
    [(1.0, 256, 0, 256), (4.0, 256, 0, 64), (4.0, 256, 100, 89), (2.0, 9, 0, 4)],
)
def test_eviction_budget(cr, n, generated, expected):
    assert eviction_budget(cr, n, generated) == expected


def test_eviction_budget_is_clamped(caplog):
    with caplog.at_level(logging.WARNING):
        assert eviction_budget(4.0, 4) == 2
    assert "clamped" in caplog.text


def test_eviction_budget_rejects_ratio_below_one():
    with pytest.raises(PreconditionError):
        eviction_budget(0.5, 10)


def test_h2o_drops_lowest_accumulated_outside_recent_window():
    state = _state(EvictionPolicy.H2O, budget=4, n=5)
    assert state.window == 2
    evicted = h2o_evict(state, np.array([0.3, 0.1, 0.2, 0.25, 0.15]))
    assert evicted == 1
    assert state.positions.tolist() == [0, 2, 3, 4]


def test_h2o_never_evicts_recent_tokens():
    state = _state(EvictionPolicy.H2O, budget=4, n=5)
    evicted = h2o_evict(state, np.array([0.5, 0.4, 0.3, 0.0, 0.0]))
    assert evicted == 2
    assert state.positions.tolist()[-2:] == [3, 4]


def test_h2o_accumulates_scores_across_steps():
    state = _state(EvictionPolicy.H2O, budget=3, n=3)
    assert h2o_evict(state, np.array([0.1, 0.6, 0.3])) is None
    state.admit(3)
    # running totals become [0.5, 0.6, 0.3, 0.2]; candidates are the two oldest
    assert h2o_evict(state, np.array([0.4, 0.0, 0.0, 0.2])) == 0
    assert state.accumulated_scores.tolist() == pytest.approx([0.6, 0.3, 0.2])


def test_tova_drops_least_attended():
    state = _state(EvictionPolicy.TOVA, budget=3, n=4)
    assert tova_evict(state, np.array([0.1, 0.05, 0.5, 0.35])) == 1
    assert state.positions.tolist() == [0, 2, 3]


def test_ties_go_to_the_oldest_token():
    state = _state(EvictionPolicy.TOVA, budget=3, n=4)
    assert tova_evict(state, np.array([0.2, 0.2, 0.3, 0.3])) == 0
    state = _state(EvictionPolicy.H2O, budget=2, n=4)
    assert h2o_evict(state, np.array([0.25, 0.25, 0.25, 0.25])) == 0


def test_no_eviction_within_budget():
    state = _state(EvictionPolicy.TOVA, budget=4, n=4)
    assert tova_evict(state, np.full(4, 0.25)) is None
    assert len(state) == 4


def test_row_must_match_cache():
    state = _state(EvictionPolicy.TOVA, budget=2, n=3)
    with pytest.raises(DimensionError):
        tova_evict(state, np.ones(2))


@pytest.mark.parametrize("policy", ["h2o", "tova"])
def test_large_budget_matches_vanilla_bit_for_bit(model, policy):
    tokens = np.random.default_rng(0).integers(0, 256, size=12)
    caches = EvictionCaches(model.config, policy, cr=1.0, prompt_len=12, budget_for=lambda p: 64)
    evicting = model.decode_sequence(tokens, caches)
    plain = model.decode_sequence(tokens, VanillaCaches(model.config))
    assert np.array_equal(evicting, plain)


@pytest.mark.parametrize("policy", ["h2o", "tova"])
def test_cache_never_exceeds_budget(model, policy):
    n = 32
    caches = EvictionCaches(model.config, policy, cr=4.0, prompt_len=n)
    for token in np.random.default_rng(1).integers(0, 256, size=n):
        model.decode_step(int(token), caches)
        assert max(map(max, caches.lengths())) <= 8
    assert caches.lengths() == [[8, 8], [8, 8]]


def test_budget_grows_while_generating(model):
    prompt_len = 8
    caches = EvictionCaches(model.config, "tova", cr=2.0, prompt_len=prompt_len)
    for token in range(16):
        model.decode_step(token, caches)
    # after 8 generated tokens the budget is floor(16 / 2)
    assert caches.lengths() == [[8, 8], [8, 8]]
    assert caches.states[0][0].budget == 8

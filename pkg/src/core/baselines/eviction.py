"""
Token eviction baselines working on materialised attention rows.

H2O keeps the most recent ceil(b/2) tokens plus the tokens with the largest attention mass
accumulated so far; TOVA drops whichever token the newest query attends to least. Both
operate per (layer, head) and break ties toward the oldest token.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from app.errors import DimensionError, PreconditionError
from core.dtos import ModelConfig
from core.enums import EvictionPolicy
from core.model.cache import ListSlots
from core.model.transformer import attention_weights

logger = logging.getLogger(__name__)

MIN_BUDGET = 2


@dataclass
class EvictionState:
    policy: EvictionPolicy
    budget: int
    accumulated_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    positions: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def window(self) -> int:
        return math.ceil(self.budget / 2)

    @property
    def recent_window(self) -> np.ndarray:
        return self.positions[-self.window :]

    def __len__(self) -> int:
        return len(self.positions)

    def admit(self, position: int) -> None:
        self.positions = np.append(self.positions, position)
        self.accumulated_scores = np.append(self.accumulated_scores, 0.0)

    def drop(self, index: int) -> None:
        self.positions = np.delete(self.positions, index)
        self.accumulated_scores = np.delete(self.accumulated_scores, index)


def _aligned(state: EvictionState, row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (len(state),):
        raise DimensionError(f"attention row of shape {row.shape} for a cache of {len(state)}")
    return row


def h2o_evict(state: EvictionState, attention_row: np.ndarray) -> int | None:
    """Add the row to the running scores; over budget, drop the lowest-scoring non-recent token."""
    state.accumulated_scores = state.accumulated_scores + _aligned(state, attention_row)
    if len(state) <= state.budget:
        return None
    candidates = len(state) - state.window
    if candidates <= 0:
        return None
    index = int(np.argmin(state.accumulated_scores[:candidates]))
    state.drop(index)
    return index


def tova_evict(state: EvictionState, last_attention_row: np.ndarray) -> int | None:
    row = _aligned(state, last_attention_row)
    if len(state) <= state.budget:
        return None
    index = int(np.argmin(row))
    state.drop(index)
    return index


def eviction_budget(cr: float, n: int, generated: int = 0) -> int:
    """floor((n + generated) / cr), never below 2 (one recent token plus one heavy hitter)."""
    if cr < 1.0:
        raise PreconditionError(f"compression ratio must be >= 1, got {cr}")
    budget = math.floor((n + generated) / cr)
    if budget < MIN_BUDGET:
        logger.warning("eviction budget %d below %d, clamped", budget, MIN_BUDGET)
        return MIN_BUDGET
    return budget


_EVICT = {EvictionPolicy.H2O: h2o_evict, EvictionPolicy.TOVA: tova_evict}


class EvictionCaches:
    """
    Decode-time mixer with one evicting cache per (layer, query head).

    `budget_for(position)` gives the budget in force after the token at `position`; the
    default grows with generated tokens past `prompt_len`.
    """

    def __init__(
        self,
        config: ModelConfig,
        policy: EvictionPolicy,
        *,
        cr: float,
        prompt_len: int,
        budget_for: Callable[[int], int] | None = None,
    ) -> None:
        self.config = config
        self.policy = EvictionPolicy.from_any(policy)
        self.position = 0
        self.cr = cr
        self.prompt_len = prompt_len
        self.budget_for = budget_for or self._growing_budget
        initial = self.budget_for(0)
        self.slots = [[ListSlots() for _ in range(config.n_heads)] for _ in range(config.n_layers)]
        self.states = [
            [EvictionState(self.policy, initial) for _ in range(config.n_heads)]
            for _ in range(config.n_layers)
        ]

    def _growing_budget(self, position: int) -> int:
        generated = max(0, position + 1 - self.prompt_len)
        return eviction_budget(self.cr, self.prompt_len, generated)

    def lengths(self) -> list[list[int]]:
        return [[len(s) for s in row] for row in self.slots]

    def mix(self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        g = self.config.gqa_groups
        budget = self.budget_for(self.position)
        evict = _EVICT[self.policy]
        out = np.empty_like(q)
        for h in range(q.shape[0]):
            slots = self.slots[layer][h]
            state = self.states[layer][h]
            state.budget = budget
            slots.append(k[h // g], v[h // g])
            state.admit(self.position)
            keys, values = slots.gather()
            weights = attention_weights(
                q[h], keys, exclude_dim0=self.config.attends_without_dim0
            )
            out[h] = weights @ values
            row = weights
            while True:
                index = evict(state, row)
                if index is None:
                    break
                slots.remove(index)
                row = np.delete(row, index)
                if self.policy is EvictionPolicy.H2O:
                    # already added to the running scores
                    row = np.zeros_like(row)
        return out

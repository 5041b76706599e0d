"""
Discrete DMC at decode time.

Each head keeps a `DMCHeadCache`. For every token the first neuron of the key decides whether
to open a new slot (alpha = 0) or merge into the open one (alpha = 1); the first neuron of the
query gives the token's weight inside its segment. The merged slot is the importance-weighted
mean of the segment's keys/values, kept up to date with a running weight sum `z`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from app.errors import PreconditionError
from core.dtos import DecisionRecord, ModelConfig
from core.enums import DMCVariant
from core.model.cache import KVSlots, ListSlots
from core.model.transformer import TransformerLM, attend
from core.numerics.ops import _sigmoid_np

logger = logging.getLogger(__name__)

OMEGA_FLOOR = 1e-6


@dataclass(frozen=True)
class DecisionOutcome:
    alpha: int
    omega: float


@dataclass
class DMCHeadCache:
    """One head's compressed cache; `segment_len` counts raw tokens merged into the last slot."""

    slots: KVSlots = field(default_factory=ListSlots)
    z: float = 0.0
    n_seen: int = 0
    segment_len: int = 0

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def keys(self) -> np.ndarray:
        return self.slots.gather()[0]

    @property
    def values(self) -> np.ndarray:
        return self.slots.gather()[1]


def decide(
    decision_logit: float,
    importance_logit: float,
    *,
    offset: float = 0.0,
    uniform_omega: bool = False,
) -> DecisionOutcome:
    """round(sigmoid(x - offset)) with ties going up, which is the same as x - offset >= 0."""
    alpha = 1 if decision_logit - offset >= 0.0 else 0
    if uniform_omega:
        return DecisionOutcome(alpha, 1.0)
    omega = float(_sigmoid_np(np.asarray(importance_logit, dtype=np.float64)))
    if omega < OMEGA_FLOOR:
        logger.debug("importance %.3g below floor, clamped to %g", omega, OMEGA_FLOOR)
        omega = OMEGA_FLOOR
    return DecisionOutcome(alpha, omega)


def zero_dim0(x: np.ndarray) -> np.ndarray:
    out = np.array(x, copy=True)
    out[..., 0] = 0.0
    return out


def extract_scores(
    q_t: np.ndarray, k_t: np.ndarray, *, offset: float = 0.0
) -> tuple[DecisionOutcome, np.ndarray, np.ndarray]:
    """Read alpha from k_t[0] and omega from q_t[0]; return both vectors with dimension 0 zeroed."""
    outcome = decide(float(k_t[0]), float(q_t[0]), offset=offset)
    return outcome, zero_dim0(q_t), zero_dim0(k_t)


def dmc_cache_update(
    cache: DMCHeadCache,
    q_t: np.ndarray,
    k_t: np.ndarray,
    v_t: np.ndarray,
    *,
    offset: float = 0.0,
    outcome: DecisionOutcome | None = None,
    window_cap: int | None = None,
) -> DecisionOutcome:
    """
    Append or accumulate one token into `cache` (mutated in place).

    `outcome` overrides the decision read from the vectors (scripted or layer-shared
    decisions). Returns the decision actually applied: an empty cache always appends, and
    with `window_cap` a segment already holding that many tokens is closed.
    """
    read, _, k_t = extract_scores(q_t, k_t, offset=offset)
    outcome = outcome or read
    alpha = outcome.alpha
    if len(cache) == 0:
        alpha = 0
    elif window_cap is not None and cache.segment_len >= window_cap:
        alpha = 0
    omega = max(outcome.omega, OMEGA_FLOOR)

    if alpha == 1:
        keys, values = cache.slots.gather()
        z_new = cache.z + omega
        k_merged = (keys[-1] * cache.z + k_t * omega) / z_new
        v_merged = (values[-1] * cache.z + v_t * omega) / z_new
        cache.slots.overwrite_last(k_merged, v_merged, z_new)
        cache.z = z_new
        cache.segment_len += 1
    else:
        cache.slots.append(k_t, np.asarray(v_t), omega)
        cache.z = omega
        cache.segment_len = 1
    cache.n_seen += 1
    return DecisionOutcome(alpha, omega)


@dataclass(frozen=True)
class CompressionBreakdown:
    global_cr: float
    per_layer: list[float]
    per_head: list[list[float]]


def compression_breakdown(caches: list[list[DMCHeadCache]]) -> CompressionBreakdown:
    lengths = np.array([[len(c) for c in row] for row in caches], dtype=np.float64)
    seen = np.array([[c.n_seen for c in row] for row in caches], dtype=np.float64)
    if seen.size == 0 or np.any(seen == 0):
        raise PreconditionError("compression ratio needs every head to have seen a token")
    per_head = seen / lengths
    per_layer = seen.sum(axis=1) / lengths.sum(axis=1)
    return CompressionBreakdown(
        global_cr=float(seen.sum() / lengths.sum()),
        per_layer=per_layer.tolist(),
        per_head=per_head.tolist(),
    )


def compression_ratio(caches: list[list[DMCHeadCache]]) -> float:
    """n_l * n_h * n_seen over the total number of slots held."""
    return compression_breakdown(caches).global_cr


class DMCCaches:
    """
    Decode-time mixer holding a `DMCHeadCache` per (layer, head).

    `scripted_alpha` / `scripted_omega` (broadcastable to (n_layers, n_heads, n)) replace the
    decisions read from the model; fixed pooling and the parity checks use them.
    """

    def __init__(
        self,
        config: ModelConfig,
        *,
        window_cap: int | None = None,
        slot_factory=None,
        scripted_alpha: np.ndarray | None = None,
        scripted_omega: np.ndarray | None = None,
        record_trace: bool = False,
        record_outputs: bool = False,
    ) -> None:
        if not config.dmc_enabled:
            raise PreconditionError("DMC decoding needs a model with dmc_enabled")
        self.config = config
        self.position = 0
        self.window_cap = window_cap
        make = slot_factory or (lambda layer, head: ListSlots())
        self.heads = [
            [DMCHeadCache(slots=make(layer, head)) for head in range(config.n_heads)]
            for layer in range(config.n_layers)
        ]
        self.scripted_alpha = scripted_alpha
        self.scripted_omega = scripted_omega
        self.trace: list[DecisionRecord] | None = [] if record_trace else None
        self.outputs: list[list[np.ndarray]] | None = (
            [[] for _ in range(config.n_layers)] if record_outputs else None
        )

    def lengths(self) -> list[list[int]]:
        return [[len(c) for c in row] for row in self.heads]

    def breakdown(self) -> CompressionBreakdown:
        return compression_breakdown(self.heads)

    def _scripted(self, table: np.ndarray, layer: int, head: int) -> float:
        arr = np.atleast_1d(np.asarray(table))
        if self.position >= arr.shape[-1]:
            raise PreconditionError(f"scripted decisions end before position {self.position}")
        shape = (self.config.n_layers, self.config.n_heads, arr.shape[-1])
        return float(np.broadcast_to(arr, shape)[layer, head, self.position])

    def _outcomes(self, layer: int, q: np.ndarray, k: np.ndarray) -> list[DecisionOutcome]:
        cfg = self.config
        decision = k[:, 0]
        importance = q[:, 0]
        if cfg.dmc_variant.shares_decisions:
            decision = np.full_like(decision, decision.mean())
            importance = np.full_like(importance, importance.mean())
        uniform = cfg.dmc_variant is DMCVariant.UNIFORM_OMEGA
        outcomes = []
        for h in range(cfg.n_heads):
            out = decide(
                float(decision[h]),
                float(importance[h]),
                offset=cfg.decision_offset,
                uniform_omega=uniform,
            )
            if self.scripted_alpha is not None:
                out = DecisionOutcome(int(self._scripted(self.scripted_alpha, layer, h)), out.omega)
            if self.scripted_omega is not None:
                out = DecisionOutcome(out.alpha, self._scripted(self.scripted_omega, layer, h))
            outcomes.append(out)
        return outcomes

    def mix(self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        row = self.heads[layer]
        out = np.empty_like(q)
        for h, outcome in enumerate(self._outcomes(layer, q, k)):
            applied = dmc_cache_update(
                row[h], q[h], k[h], v[h], outcome=outcome, window_cap=self.window_cap
            )
            if self.trace is not None:
                self.trace.append(
                    DecisionRecord(
                        layer=layer,
                        head=h,
                        t=self.position,
                        alpha=applied.alpha,
                        omega=applied.omega,
                    )
                )
            out[h] = attend(zero_dim0(q[h]), (row[h].keys, row[h].values), exclude_dim0=True)
        if self.outputs is not None:
            self.outputs[layer].append(out.copy())
        return out


def dmc_decode_step(model: TransformerLM, token: int, caches: DMCCaches) -> np.ndarray:
    """Project, decide, update and attend for every head of every layer; returns logits."""
    return model.decode_token(token, caches)

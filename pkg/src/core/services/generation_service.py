"""Token-by-token decoding with a chosen cache policy: greedy or temperature sampling."""

from __future__ import annotations

import logging
from collections.abc import Callable

import numpy as np

from app.errors import CapacityError, PreconditionError
from core.baselines.eviction import EvictionCaches
from core.baselines.pooling import fixed_pool_decisions
from core.dmc.inference import DMCCaches
from core.enums import EvalMode, EvictionPolicy
from core.model.cache import KVSlots
from core.model.transformer import TokenMixer, TransformerLM, VanillaCaches, softmax_np

logger = logging.getLogger(__name__)

SlotFactory = Callable[[int, int], KVSlots]

DECODE_MODES = (
    EvalMode.VANILLA,
    EvalMode.DMC_INFER_PATH,
    EvalMode.FIXED_POOL,
    EvalMode.H2O,
    EvalMode.TOVA,
)


def make_mixer(
    model: TransformerLM,
    mode: EvalMode | str,
    *,
    total_len: int,
    prompt_len: int | None = None,
    cr: float = 2.0,
    pool_width: int | None = None,
    window_cap: int | None = None,
    slot_factory: SlotFactory | None = None,
    budget_for: Callable[[int], int] | None = None,
    record_trace: bool = False,
) -> TokenMixer:
    """
    Fresh caches for one sequence of `total_len` positions.

    `cr` sets the eviction budget and doubles as the default pooling width; `prompt_len`
    defaults to `total_len`, which keeps the eviction budget fixed over the whole sequence.
    """
    mode = EvalMode.from_any(mode)
    cfg = model.config
    if mode is EvalMode.VANILLA:
        return VanillaCaches(cfg, slot_factory)
    if mode is EvalMode.DMC_INFER_PATH:
        return DMCCaches(
            cfg, window_cap=window_cap, slot_factory=slot_factory, record_trace=record_trace
        )
    if mode is EvalMode.FIXED_POOL:
        width = pool_width or max(int(round(cr)), 1)
        alpha, omega = fixed_pool_decisions(total_len, width)
        return DMCCaches(
            cfg,
            slot_factory=slot_factory,
            scripted_alpha=alpha,
            scripted_omega=omega,
            record_trace=record_trace,
        )
    if mode in (EvalMode.H2O, EvalMode.TOVA):
        return EvictionCaches(
            cfg,
            EvictionPolicy.from_any(mode.value),
            cr=cr,
            prompt_len=prompt_len if prompt_len is not None else total_len,
            budget_for=budget_for,
        )
    raise PreconditionError(f"{mode.value} is not a token-by-token decoding mode")


def sample_next(
    logits: np.ndarray, *, temperature: float = 0.0, rng: np.random.Generator | None = None
) -> int:
    """Greedy at temperature 0; otherwise a draw from softmax(logits / temperature)."""
    if temperature <= 0.0:
        return int(np.argmax(logits))
    if rng is None:
        raise PreconditionError("temperature sampling needs a random generator")
    probs = softmax_np(np.asarray(logits, dtype=np.float64) / temperature)
    return int(rng.choice(len(probs), p=probs))


def generate(
    model: TransformerLM,
    prompt: np.ndarray,
    n_new: int,
    mixer: TokenMixer,
    *,
    temperature: float = 0.0,
    rng: np.random.Generator | None = None,
    on_token: Callable[[int, int], None] | None = None,
) -> np.ndarray:
    """
    Feed `prompt`, then produce `n_new` tokens; every generated token is fed back so the
    caches end up holding prompt + generated positions.

    `on_token(index, token)` fires after each generated token has been decoded.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    if prompt.size == 0:
        raise PreconditionError("generation needs at least one prompt token")
    total = prompt.size + n_new
    if total > model.config.max_seq:
        raise CapacityError(
            f"prompt {prompt.size} + {n_new} new tokens exceeds max_seq={model.config.max_seq}"
        )
    logits = None
    for token in prompt:
        logits = model.decode_token(int(token), mixer)
    out = []
    for i in range(n_new):
        token = sample_next(logits, temperature=temperature, rng=rng)
        out.append(token)
        logits = model.decode_token(token, mixer)
        if on_token is not None:
            on_token(i, token)
    return np.asarray(out, dtype=np.int64)

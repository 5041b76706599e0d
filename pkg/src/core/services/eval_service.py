"""
Validation perplexity under every attention/cache mode.

Parallel modes (vanilla, DMC train path, fixed pool) run teacher-forced batches through
`forward_lm`; decode modes (DMC inference, H2O, TOVA) replay each window token by token.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from app.errors import PreconditionError
from core.baselines.eviction import eviction_budget
from core.baselines.pooling import fixed_pool_decisions
from core.dmc.inference import DMCCaches
from core.dmc.training import DMCAttention, dmc_train_forward
from core.dtos import DMCConfig, GumbelParams, ModelConfig
from core.enums import EvalMode
from core.model.checkpoint import Checkpoint
from core.model.transformer import TransformerLM
from core.numerics import ops
from core.services.generation_service import make_mixer
from core.training.batching import eval_windows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalResult:
    mode: EvalMode
    loss: float
    n_tokens: int
    # slots kept vs. vanilla, for the modes that compress
    achieved_cr: float | None = None

    @property
    def perplexity(self) -> float:
        return math.exp(self.loss)


def inference_dmc_config(config: ModelConfig, *, window: int | None = None) -> DMCConfig:
    """The DMC settings a trained model decodes with, for running its training path exactly."""
    return DMCConfig(
        gumbel=GumbelParams(c=config.decision_offset),
        variant=config.dmc_variant,
        window=window,
    )


def token_nll(logits: np.ndarray, targets: np.ndarray) -> float:
    """Summed negative log-likelihood of `targets` under row-wise softmax(`logits`)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, np.asarray(targets)[..., None], axis=-1)[..., 0]
    return float(np.sum(log_z - picked))


class _Tally:
    def __init__(self) -> None:
        self.nll = 0.0
        self.tokens = 0
        self.seen = 0
        self.kept = 0

    def add_loss(self, mean_loss: float, count: int) -> None:
        self.nll += mean_loss * count
        self.tokens += count

    def result(self, mode: EvalMode, compresses: bool) -> EvalResult:
        if self.tokens == 0:
            raise PreconditionError("evaluation split produced no windows")
        cr = self.seen / self.kept if compresses and self.kept else None
        return EvalResult(
            mode=mode, loss=self.nll / self.tokens, n_tokens=self.tokens, achieved_cr=cr
        )


def _as_model(source: Checkpoint | TransformerLM, dtype) -> tuple[TransformerLM, Checkpoint | None]:
    if isinstance(source, Checkpoint):
        return source.model(dtype), source
    return source, None


def eval_perplexity(
    source: Checkpoint | TransformerLM,
    tokens: np.ndarray,
    mode: EvalMode | str = EvalMode.VANILLA,
    *,
    seq_len: int,
    batch_size: int = 8,
    max_windows: int | None = None,
    cr: float = 2.0,
    pool_width: int | None = None,
    window_cap: int | None = None,
    dtype=np.float64,
) -> EvalResult:
    """
    exp(mean next-token loss) over consecutive windows of `tokens`.

    `cr` is the eviction target for h2o/tova (budget floor(seq_len / cr)); the pooling width
    comes from `pool_width`, then the checkpoint manifest, then round(cr).
    """
    mode = EvalMode.from_any(mode)
    model, checkpoint = _as_model(source, dtype)
    cfg = model.config
    windows = eval_windows(tokens, seq_len, max_windows)
    if checkpoint is not None and pool_width is None:
        pool_width = checkpoint.manifest.pool_width
    tally = _Tally()

    if mode in (EvalMode.VANILLA, EvalMode.DMC_TRAIN_PATH, EvalMode.FIXED_POOL):
        for start in range(0, len(windows), batch_size):
            batch = windows[start : start + batch_size]
            _parallel_batch(model, batch, mode, tally, cr=cr, pool_width=pool_width)
    else:
        if mode is EvalMode.DMC_INFER_PATH and not cfg.dmc_enabled:
            raise PreconditionError("dmc-infer-path needs a checkpoint with dmc_enabled")
        budget = eviction_budget(cr, seq_len)
        for window in windows:
            mixer = make_mixer(
                model,
                mode,
                total_len=seq_len,
                cr=cr,
                window_cap=window_cap,
                budget_for=lambda _position: budget,
            )
            logits = model.decode_sequence(window[:-1], mixer)
            tally.nll += token_nll(logits, window[1:])
            tally.tokens += seq_len
            if isinstance(mixer, DMCCaches):
                tally.seen += cfg.n_layers * cfg.n_heads * seq_len
                tally.kept += int(np.sum(mixer.lengths()))

    compresses = mode is not EvalMode.VANILLA and mode not in (EvalMode.H2O, EvalMode.TOVA)
    result = tally.result(mode, compresses)
    logger.info(
        "eval %s: loss %.4f perplexity %.3f over %d tokens",
        mode.value,
        result.loss,
        result.perplexity,
        result.n_tokens,
    )
    return result


def _parallel_batch(
    model: TransformerLM,
    batch: np.ndarray,
    mode: EvalMode,
    tally: _Tally,
    *,
    cr: float,
    pool_width: int | None,
) -> None:
    cfg = model.config
    inputs, targets = batch[:, :-1], batch[:, 1:]
    if mode is EvalMode.VANILLA:
        logits = model.forward_lm(inputs)
        tally.add_loss(ops.cross_entropy_lm(logits, targets).item(), targets.size)
        return
    if not cfg.dmc_enabled:
        raise PreconditionError(f"{mode.value} needs a checkpoint with dmc_enabled")
    dmc = inference_dmc_config(cfg)
    if mode is EvalMode.FIXED_POOL:
        alpha, omega = fixed_pool_decisions(inputs.shape[1], pool_width or max(round(cr), 1))
        attention = DMCAttention(cfg, dmc, scripted_alpha=alpha, scripted_omega=omega, window=None)
    else:
        attention = DMCAttention(cfg, dmc, hard=True, window=None)
    loss, decisions = dmc_train_forward(model, batch, dmc, attention=attention)
    tally.add_loss(loss.item(), targets.size)
    tally.seen += int(decisions.valid_mask().sum()) * cfg.n_layers * cfg.n_heads
    tally.kept += int(decisions.kept_slots().sum())

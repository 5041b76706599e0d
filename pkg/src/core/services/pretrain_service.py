from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Protocol

import numpy as np

from app.errors import ConfigError, NumericalAbortError
from core.dtos import ExperimentConfig, MetricsRecord
from core.enums import EvalMode, RetrofitPhase
from core.model.checkpoint import Checkpoint, snapshot
from core.model.transformer import AttentionFn, TransformerLM
from core.numerics import ops
from core.numerics.tensor import Tape, Tensor
from core.services.corpus_service import Corpus
from core.services.eval_service import eval_perplexity
from core.training.batching import BatchSampler
from core.training.optim import AdamW, zero_grads

logger = logging.getLogger(__name__)


# Keep storage abstract; infra provides the concrete writers
class MetricsSink(Protocol):
    def write(self, record: MetricsRecord) -> None: ...


class CheckpointSink(Protocol):
    def save(self, checkpoint: Checkpoint, name: str) -> Path: ...


def run_dtype(config: ExperimentConfig) -> np.dtype:
    return np.dtype(config.run.dtype)


def eval_window_count(config: ExperimentConfig) -> int:
    return config.data.batch_size * config.data.eval_batches


def check_finite(loss: Tensor, *, phase: RetrofitPhase, step: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalAbortError(
            f"{phase.value} loss became {value} at step {step}",
            details={"phase": phase.value, "step": step},
        )
    return value


def apply_update(
    model: TransformerLM, optimizer: AdamW, tape: Tape, loss: Tensor, *, lr_mult: float = 1.0
) -> None:
    tape.backward(loss)
    optimizer.step(model.params, lr_mult=lr_mult)
    zero_grads(model.params)


def lm_train_step(
    model: TransformerLM,
    optimizer: AdamW,
    batch: np.ndarray,
    *,
    phase: RetrofitPhase,
    step: int,
    attention: AttentionFn | None = None,
    lr_mult: float = 1.0,
) -> float:
    """One teacher-forced LM update on a (B, n + 1) batch; returns the pre-update loss."""
    with Tape() as tape:
        logits = model.forward_lm(batch[:, :-1], attention=attention)
        loss = ops.cross_entropy_lm(logits, batch[:, 1:])
    value = check_finite(loss, phase=phase, step=step)
    apply_update(model, optimizer, tape, loss, lr_mult=lr_mult)
    return value


class PretrainService:
    """
    Trains the vanilla byte-level model that later gets retrofitted.

    The recorded validation loss is measured on the saved (float32) weights, so evaluating
    the checkpoint in vanilla mode reproduces it.
    """

    def __init__(self, metrics: MetricsSink, checkpoints: CheckpointSink | None = None) -> None:
        self._metrics = metrics
        self._checkpoints = checkpoints

    def pretrain(self, config: ExperimentConfig, corpus: Corpus) -> Checkpoint:
        if config.model.dmc_enabled:
            raise ConfigError("pretraining runs the vanilla model; set model.dmc_enabled = false")
        run, data = config.run, config.data
        dtype = run_dtype(config)
        model = TransformerLM(config.model, seed=run.seed, dtype=dtype)
        rng = np.random.default_rng(run.seed)
        sampler = BatchSampler(corpus.train, data.batch_size, data.seq_len, rng)
        optimizer = AdamW(config.optimizer)
        phase = RetrofitPhase.PRETRAIN

        logger.info(
            "pretraining %d steps (%d layers, %d heads, d=%d)",
            run.pretrain_steps,
            config.model.n_layers,
            config.model.n_heads,
            config.model.d_model,
        )
        for step in range(run.pretrain_steps):
            loss = lm_train_step(model, optimizer, sampler.sample(), phase=phase, step=step)
            last = step == run.pretrain_steps - 1
            if step % run.log_every == 0 or last:
                self._metrics.write(MetricsRecord(phase=phase, step=step, lm_loss=loss))
            if (step + 1) % run.eval_every == 0 and not last:
                val = self._validate(model, corpus, config)
                self._metrics.write(
                    MetricsRecord(kind="eval", phase=phase, step=step, val_loss=val)
                )

        checkpoint = snapshot(
            model,
            phase=phase,
            step=run.pretrain_steps,
            seed=run.seed,
            rng_state={"batches": rng.bit_generator.state},
        )
        val = eval_perplexity(
            checkpoint,
            corpus.validation,
            EvalMode.VANILLA,
            seq_len=data.seq_len,
            batch_size=data.batch_size,
            max_windows=eval_window_count(config),
            dtype=dtype,
        ).loss
        checkpoint.manifest = checkpoint.manifest.model_copy(update={"val_loss": val})
        self._metrics.write(
            MetricsRecord(kind="eval", phase=phase, step=run.pretrain_steps, val_loss=val)
        )
        if self._checkpoints is not None:
            path = self._checkpoints.save(checkpoint, f"{run.name}-base")
            self._metrics.write(
                MetricsRecord(
                    kind="checkpoint",
                    phase=phase,
                    step=run.pretrain_steps,
                    val_loss=val,
                    path=str(path),
                )
            )
        logger.info("pretraining done: validation loss %.4f", val)
        return checkpoint

    def _validate(self, model: TransformerLM, corpus: Corpus, config: ExperimentConfig) -> float:
        return eval_perplexity(
            model,
            corpus.validation,
            EvalMode.VANILLA,
            seq_len=config.data.seq_len,
            batch_size=config.data.batch_size,
            max_windows=eval_window_count(config),
        ).loss

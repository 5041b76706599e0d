"""
Retrofitting a pretrained checkpoint.

DMC (and the fixed-pooling ablation) runs three phases:

1. adaptation: dimension 0 of q/k is faded out of attention over `adaptation_steps`;
2. ramp: the target compression ratio follows the schedule while the auxiliary losses push
   the learned decisions towards it; a checkpoint is emitted at every integer CR crossed
   and at ramp end;
3. solidify: CR held at target, learning rate decays on a cosine.

The GQA baseline converts the checkpoint and up-trains for the same number of steps.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from app.errors import ConfigError
from core.baselines.gqa import gqa_convert_params
from core.baselines.pooling import fixed_pool_decisions
from core.dmc.schedule import integer_crossings, schedule_target_cr
from core.dmc.training import (
    DMCAttention,
    anneal_factor,
    combine_losses,
    dmc_train_forward,
)
from core.dtos import ExperimentConfig, MetricsRecord, ModelConfig
from core.enums import BaselineKind, EvalMode, RetrofitPhase
from core.model.checkpoint import Checkpoint, snapshot
from core.model.transformer import AttentionFn, TransformerLM
from core.numerics import ops
from core.numerics.tensor import Tape
from core.services.corpus_service import Corpus
from core.services.eval_service import eval_perplexity
from core.services.pretrain_service import (
    CheckpointSink,
    MetricsSink,
    apply_update,
    check_finite,
    eval_window_count,
    lm_train_step,
    run_dtype,
)
from core.training.batching import BatchSampler, eval_windows
from core.training.optim import AdamW

logger = logging.getLogger(__name__)

# dimensions a retrofit must not change
_SHAPE_FIELDS = (
    "n_layers", "n_heads", "d_model", "vocab_size", "max_seq", "ffn_mult", "position_scheme",
)


def check_base_matches(base: ModelConfig, wanted: ModelConfig) -> None:
    mismatched = {
        name: {"checkpoint": getattr(base, name), "config": getattr(wanted, name)}
        for name in _SHAPE_FIELDS
        if getattr(base, name) != getattr(wanted, name)
    }
    if mismatched:
        raise ConfigError(
            "base checkpoint does not match the configured model dimensions",
            details={k: {s: str(v) for s, v in d.items()} for k, d in mismatched.items()},
        )


def dmc_model_config(base: ModelConfig, config: ExperimentConfig) -> ModelConfig:
    """The base dimensions with DMC switched on and the decision settings baked in."""
    return ModelConfig.model_validate(
        {
            **base.model_dump(),
            "dmc_enabled": True,
            "decision_offset": config.dmc.gumbel.c,
            "dmc_variant": config.dmc.variant,
        }
    )


def pool_width_for(config: ExperimentConfig) -> int:
    return config.baseline.pool_width or max(int(round(config.dmc.schedule.target_cr)), 1)


@dataclass
class SpikeGuard:
    """Flags validation perplexity above `factor` times the perplexity at phase start."""

    factor: float
    reference: float | None = None

    def start(self, loss: float) -> None:
        self.reference = math.exp(loss)

    def check(self, loss: float) -> str | None:
        if self.reference is None:
            return None
        ppl = math.exp(loss)
        if ppl > self.factor * self.reference:
            return (
                f"validation perplexity {ppl:.3f} exceeds {self.factor:g}x "
                f"the phase-start value {self.reference:.3f}"
            )
        return None


class RetrofitService:
    def __init__(self, metrics: MetricsSink, checkpoints: CheckpointSink | None = None) -> None:
        self._metrics = metrics
        self._checkpoints = checkpoints

    # ------------------------------------------------------------------
    # Entry point
    # ------------------------------------------------------------------

    def retrofit(
        self, base: Checkpoint, config: ExperimentConfig, corpus: Corpus
    ) -> list[Checkpoint]:
        check_base_matches(base.config, config.model)
        kind = config.baseline.kind
        if not kind.needs_training:
            raise ConfigError(
                f"{kind.value} needs no retrofit; "
                f"evaluate the base checkpoint with --mode {kind.value}"
            )
        if base.config.dmc_enabled:
            raise ConfigError("the base checkpoint is already a DMC model")

        run = _Run(config, corpus, base.model(run_dtype(config)))
        if kind is BaselineKind.GQA:
            return self._uptrain_gqa(run)
        self._adapt(run)
        return self._compress(run, fixed_pool=kind is BaselineKind.FIXED_POOL)

    # ------------------------------------------------------------------
    # Phases
    # ------------------------------------------------------------------

    def _adapt(self, run: _Run) -> None:
        n_t = run.config.dmc.adaptation_steps
        phase = RetrofitPhase.ADAPTATION
        logger.info("adaptation: fading dimension 0 out of attention over %d steps", n_t)
        guard = SpikeGuard(run.config.dmc.spike_guard)
        guard.start(run.val_loss(lambda: run.model.vanilla_attention(dim0_scale=1.0)))
        for step in range(n_t):
            attention = run.model.vanilla_attention(dim0_scale=anneal_factor(step, n_t))
            loss = lm_train_step(
                run.model,
                run.optimizer,
                run.sampler.sample(),
                phase=phase,
                step=step,
                attention=attention,
            )
            if run.should_log(step, n_t):
                self._metrics.write(
                    MetricsRecord(phase=phase, step=step, lm_loss=loss, target_cr=1.0)
                )
            if run.should_eval(step, n_t):
                self._guard(guard, run.val_loss(lambda: attention), phase, step)

        run.model.config = dmc_model_config(run.model.config, run.config)
        logger.info(
            "adaptation done; decisions now read from dimension 0 (offset %.3g, variant %s)",
            run.model.config.decision_offset,
            run.model.config.dmc_variant.label,
        )

    def _compress(self, run: _Run, *, fixed_pool: bool) -> list[Checkpoint]:
        config = run.config
        schedule = config.dmc.schedule
        total = schedule.total_steps
        emitted: list[Checkpoint] = []
        pool_width = pool_width_for(config) if fixed_pool else None
        if fixed_pool:
            logger.info("fixed pooling: one slot per %d tokens", pool_width)

        guard = SpikeGuard(config.dmc.spike_guard)
        guard.start(run.val_loss(run.hard_attention(pool_width)))
        previous_cr = schedule.start_cr
        current_phase = RetrofitPhase.RAMP if schedule.ramp_steps else RetrofitPhase.SOLIDIFY
        logger.info("%s: %d steps towards CR %.2f", current_phase.value, total, schedule.target_cr)

        for step in range(total):
            target = schedule_target_cr(step, schedule)
            if target.phase is not current_phase:
                current_phase = target.phase
                logger.info("solidify: holding CR %.2f with cosine lr decay", target.cr)
                guard.start(run.val_loss(run.hard_attention(pool_width)))

            batch = run.sampler.sample()
            attention = run.train_attention(pool_width)
            with Tape() as tape:
                lm, decisions = dmc_train_forward(run.model, batch, config.dmc, attention=attention)
                losses = combine_losses(lm, decisions, target.cr, config.dmc)
                objective = lm if fixed_pool else losses.total
            check_finite(objective, phase=target.phase, step=step)
            apply_update(run.model, run.optimizer, tape, objective, lr_mult=target.lr_mult)

            if run.should_log(step, total):
                floats = losses.as_floats()
                self._metrics.write(
                    MetricsRecord(
                        phase=target.phase,
                        step=step,
                        lm_loss=floats["lm_loss"],
                        cr_loss=None if fixed_pool else floats["cr_loss"],
                        head_loss=floats["head_loss"],
                        target_cr=target.cr,
                        achieved_cr=decisions.achieved_cr(),
                        achieved_cr_per_layer=decisions.achieved_cr_per_layer(),
                        lr_mult=target.lr_mult,
                    )
                )
            if run.should_eval(step, total):
                self._guard(guard, run.val_loss(run.hard_attention(pool_width)), target.phase, step)

            if target.phase is RetrofitPhase.RAMP and not fixed_pool:
                next_cr = schedule_target_cr(step + 1, schedule).cr
                for crossed in integer_crossings(previous_cr, next_cr):
                    emitted.append(
                        self._emit(
                            run,
                            RetrofitPhase.RAMP,
                            step + 1,
                            float(crossed),
                            f"cr{crossed}",
                            pool_width,
                        )
                    )
                previous_cr = next_cr
            crossed_here = bool(emitted) and emitted[-1].manifest.step == step + 1
            if step + 1 == schedule.ramp_steps and schedule.solidify_steps and not crossed_here:
                emitted.append(
                    self._emit(run, RetrofitPhase.RAMP, step + 1, target.cr, "ramp-end", pool_width)
                )

        final_phase = RetrofitPhase.SOLIDIFY if schedule.solidify_steps else RetrofitPhase.RAMP
        emitted.append(
            self._emit(run, final_phase, total, schedule.target_cr, "final", pool_width)
        )
        return emitted

    def _uptrain_gqa(self, run: _Run) -> list[Checkpoint]:
        groups = run.config.baseline.gqa_groups
        params, grouped = gqa_convert_params(run.model.params, run.model.config, groups)
        run.model = TransformerLM(grouped, params)
        run.optimizer.reset()
        schedule = run.config.dmc.schedule
        total = schedule.total_steps
        phase = RetrofitPhase.UPTRAIN
        logger.info("GQA up-training: %d key/value heads, %d steps", grouped.n_kv_heads, total)
        guard = SpikeGuard(run.config.dmc.spike_guard)
        guard.start(run.val_loss(lambda: None))
        for step in range(total):
            lr_mult = schedule_target_cr(step, schedule).lr_mult
            loss = lm_train_step(
                run.model,
                run.optimizer,
                run.sampler.sample(),
                phase=phase,
                step=step,
                lr_mult=lr_mult,
            )
            if run.should_log(step, total):
                self._metrics.write(
                    MetricsRecord(
                        phase=phase,
                        step=step,
                        lm_loss=loss,
                        target_cr=float(groups),
                        lr_mult=lr_mult,
                    )
                )
            if run.should_eval(step, total):
                self._guard(guard, run.val_loss(lambda: None), phase, step)
        return [self._emit(run, phase, total, float(groups), "final", None)]

    # ------------------------------------------------------------------
    # Helpers
    # ------------------------------------------------------------------

    def _guard(self, guard: SpikeGuard, loss: float, phase: RetrofitPhase, step: int) -> None:
        self._metrics.write(MetricsRecord(kind="eval", phase=phase, step=step, val_loss=loss))
        message = guard.check(loss)
        if message is not None:
            logger.warning("%s step %d: %s", phase.value, step, message)
            self._metrics.write(
                MetricsRecord(
                    kind="warning", phase=phase, step=step, val_loss=loss, message=message
                )
            )

    def _emit(
        self,
        run: _Run,
        phase: RetrofitPhase,
        step: int,
        target_cr: float,
        label: str,
        pool_width: int | None,
    ) -> Checkpoint:
        config = run.config
        kind = config.baseline.kind
        checkpoint = snapshot(
            run.model,
            phase=phase,
            step=step,
            target_cr=target_cr,
            seed=config.run.seed,
            rng_state=run.rng_state(),
            baseline=kind,
            pool_width=pool_width,
        )
        if kind is BaselineKind.GQA:
            mode = EvalMode.VANILLA
        elif pool_width is not None:
            mode = EvalMode.FIXED_POOL
        else:
            mode = EvalMode.DMC_TRAIN_PATH
        result = eval_perplexity(
            checkpoint,
            run.corpus.validation,
            mode,
            seq_len=config.data.seq_len,
            batch_size=config.data.batch_size,
            max_windows=eval_window_count(config),
            pool_width=pool_width,
            dtype=run.dtype,
        )
        achieved = result.achieved_cr if result.achieved_cr is not None else target_cr
        checkpoint.manifest = checkpoint.manifest.model_copy(
            update={"achieved_cr": achieved, "val_loss": result.loss}
        )
        path = None
        if self._checkpoints is not None:
            method = "dmc" if kind is BaselineKind.NONE else kind.value
            path = self._checkpoints.save(checkpoint, f"{config.run.name}-{method}-{label}")
        self._metrics.write(
            MetricsRecord(
                kind="checkpoint",
                phase=phase,
                step=step,
                target_cr=target_cr,
                achieved_cr=achieved,
                val_loss=result.loss,
                path=None if path is None else str(path),
            )
        )
        logger.info(
            "checkpoint %s: target CR %.2f, achieved %.3f, validation loss %.4f",
            label,
            target_cr,
            achieved,
            result.loss,
        )
        return checkpoint


class _Run:
    """Mutable state shared by the phases of one retrofit run."""

    def __init__(self, config: ExperimentConfig, corpus: Corpus, model: TransformerLM) -> None:
        self.config = config
        self.corpus = corpus
        self.model = model
        self.dtype = run_dtype(config)
        seed = config.run.seed
        self.batch_rng = np.random.default_rng(seed)
        self.gumbel_rng = np.random.default_rng([seed, config.dmc.gumbel.rng_seed])
        self.sampler = BatchSampler(
            corpus.train, config.data.batch_size, config.data.seq_len, self.batch_rng
        )
        self.optimizer = AdamW(config.optimizer)
        self.val_windows = eval_windows(
            corpus.validation, config.data.seq_len, eval_window_count(config)
        )

    def should_log(self, step: int, total: int) -> bool:
        return step % self.config.run.log_every == 0 or step == total - 1

    def should_eval(self, step: int, total: int) -> bool:
        return (step + 1) % self.config.run.eval_every == 0 or step == total - 1

    def rng_state(self) -> dict:
        return {
            "batches": self.batch_rng.bit_generator.state,
            "gumbel": self.gumbel_rng.bit_generator.state,
        }

    def train_attention(self, pool_width: int | None) -> DMCAttention:
        cfg, dmc = self.model.config, self.config.dmc
        if pool_width is not None:
            alpha, omega = fixed_pool_decisions(self.config.data.seq_len, pool_width)
            return DMCAttention(cfg, dmc, scripted_alpha=alpha, scripted_omega=omega)
        return DMCAttention(cfg, dmc, rng=self.gumbel_rng)

    def hard_attention(self, pool_width: int | None) -> Callable[[], AttentionFn]:
        """Factory of deterministic attention for validation (fresh state per batch)."""
        cfg, dmc = self.model.config, self.config.dmc
        if pool_width is not None:
            alpha, omega = fixed_pool_decisions(self.config.data.seq_len, pool_width)
            return lambda: DMCAttention(
                cfg, dmc, scripted_alpha=alpha, scripted_omega=omega, window=None
            )
        return lambda: DMCAttention(cfg, dmc, hard=True, window=None)

    def val_loss(self, make_attention: Callable[[], AttentionFn | None]) -> float:
        """Mean validation loss; `make_attention` is called once per batch."""
        batch_size = self.config.data.batch_size
        total, count = 0.0, 0
        for start in range(0, len(self.val_windows), batch_size):
            batch = self.val_windows[start : start + batch_size]
            logits = self.model.forward_lm(batch[:, :-1], attention=make_attention())
            targets = batch[:, 1:]
            total += ops.cross_entropy_lm(logits, targets).item() * targets.size
            count += targets.size
        return total / count


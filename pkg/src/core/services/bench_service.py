"""
Decode benchmark: feed a prompt, generate greedily, and account for KV memory.

Memory is counted in logical slots (one key plus one value vector per slot) summed over
layers, heads and sequences. The vanilla reference is n_layers * n_heads * (prompt + gen) per
sequence, so the measured compression ratio is that reference over the peak slot count.
Throughput is reported but is CPU wall time and nothing more.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable, Sequence
from typing import Protocol

import numpy as np

from app.errors import CapacityError, PreconditionError
from core.dtos import BenchRecord, BenchRun, MemoryReport, ModelConfig
from core.enums import EvalMode
from core.model.checkpoint import Checkpoint
from core.model.transformer import TokenMixer, TransformerLM
from core.services.generation_service import SlotFactory, make_mixer, sample_next

logger = logging.getLogger(__name__)

_PAGED = (EvalMode.VANILLA, EvalMode.DMC_INFER_PATH, EvalMode.FIXED_POOL)


class KVStore(Protocol):
    def slot_factory(self, sequence: int = 0) -> SlotFactory: ...
    def memory_report(self) -> MemoryReport: ...


StoreFactory = Callable[[ModelConfig, np.dtype], KVStore]


def default_methods(model: TransformerLM, pool_width: int | None = None) -> list[EvalMode]:
    methods = [EvalMode.VANILLA]
    if model.config.dmc_enabled:
        methods.append(EvalMode.DMC_INFER_PATH)
        if pool_width is not None:
            methods.append(EvalMode.FIXED_POOL)
    return methods + [EvalMode.H2O, EvalMode.TOVA]


def _held(mixer: TokenMixer) -> int:
    return int(np.sum(mixer.lengths()))


class BenchService:
    """`new_store` builds a fresh paged store per method; without it caches are plain lists."""

    def __init__(self, new_store: StoreFactory | None = None) -> None:
        self._new_store = new_store

    def bench_decode(
        self,
        source: Checkpoint | TransformerLM,
        prompts: np.ndarray,
        gen_len: int,
        *,
        methods: Sequence[EvalMode | str] | None = None,
        cr: float = 2.0,
        pool_width: int | None = None,
        window_cap: int | None = None,
    ) -> BenchRecord:
        """
        Run every method over the same (batch, prompt_len) prompts.

        `cr` is the eviction target; eviction budgets grow with the generated tokens as
        floor((prompt + generated) / cr).
        """
        if isinstance(source, Checkpoint):
            model = source.model()
            pool_width = pool_width or source.manifest.pool_width
        else:
            model = source
        prompts = np.atleast_2d(np.asarray(prompts, dtype=np.int64))
        batch, prompt_len = prompts.shape
        if prompt_len < 1:
            raise PreconditionError("benchmark prompts must hold at least one token")
        if prompt_len + gen_len > model.config.max_seq:
            raise CapacityError(
                f"prompt {prompt_len} + gen {gen_len} exceeds max_seq={model.config.max_seq}"
            )
        chosen = [EvalMode.from_any(m) for m in methods] if methods else default_methods(
            model, pool_width
        )
        runs = [
            self._run(
                model, prompts, gen_len, mode, cr=cr, pool_width=pool_width, window_cap=window_cap
            )
            for mode in chosen
        ]
        return BenchRecord(batch=batch, prompt_len=prompt_len, gen_len=gen_len, runs=runs)

    def _run(
        self,
        model: TransformerLM,
        prompts: np.ndarray,
        gen_len: int,
        mode: EvalMode,
        *,
        cr: float,
        pool_width: int | None,
        window_cap: int | None,
    ) -> BenchRun:
        cfg = model.config
        batch, prompt_len = prompts.shape
        total_len = prompt_len + gen_len
        store = None
        if self._new_store is not None and mode in _PAGED:
            store = self._new_store(cfg, model.dtype)

        finished_slots = 0
        peak = 0
        timings: list[float] = []
        for sequence, prompt in enumerate(prompts):
            mixer = make_mixer(
                model,
                mode,
                total_len=total_len,
                prompt_len=prompt_len,
                cr=cr,
                pool_width=pool_width,
                window_cap=window_cap,
                slot_factory=None if store is None else store.slot_factory(sequence),
            )

            logits = None
            for token in prompt:
                logits = model.decode_token(int(token), mixer)
                peak = max(peak, finished_slots + _held(mixer))
            per_token = []
            for _ in range(gen_len):
                start = time.perf_counter()
                token = sample_next(logits)
                logits = model.decode_token(token, mixer)
                per_token.append(time.perf_counter() - start)
                peak = max(peak, finished_slots + _held(mixer))
            # throughput over the final third of generation
            timings.extend(per_token[-max(len(per_token) // 3, 1) :])
            finished_slots += _held(mixer)

        vanilla = batch * cfg.n_layers * cfg.n_heads * total_len
        elapsed = sum(timings)
        run = BenchRun(
            method=mode.value,
            tokens_per_second=len(timings) / elapsed if elapsed > 0 else 0.0,
            peak_kv_slots=peak,
            peak_kv_elements=peak * 2 * cfg.head_dim,
            vanilla_kv_slots=vanilla,
            measured_cr=vanilla / peak if peak else 1.0,
            memory=None if store is None else store.memory_report(),
        )
        logger.info(
            "bench %s: %.1f tok/s, peak %d slots, CR %.3f",
            run.method,
            run.tokens_per_second,
            run.peak_kv_slots,
            run.measured_cr,
        )
        return run

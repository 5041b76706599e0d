from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from core.dtos import CheckpointManifest, ModelConfig
from core.enums import BaselineKind, RetrofitPhase
from core.model.transformer import TransformerLM
from core.model.weights import Params
from core.numerics.tensor import Tensor

FORMAT_VERSION = 1
STORED_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    """Frozen float32 weights plus the manifest that says how they were produced."""

    manifest: CheckpointManifest
    arrays: dict[str, np.ndarray]

    @property
    def config(self) -> ModelConfig:
        return self.manifest.model

    def params(self, dtype=np.float64, *, requires_grad: bool = True) -> Params:
        return {
            name: Tensor(arr.astype(dtype), requires_grad=requires_grad, name=name)
            for name, arr in self.arrays.items()
        }

    def model(self, dtype=np.float64) -> TransformerLM:
        return TransformerLM(self.config, self.params(dtype), dtype=dtype)


def snapshot(
    model: TransformerLM,
    *,
    phase: RetrofitPhase = RetrofitPhase.PRETRAIN,
    step: int = 0,
    target_cr: float = 1.0,
    achieved_cr: float | None = None,
    val_loss: float | None = None,
    seed: int = 0,
    rng_state: dict[str, Any] | None = None,
    baseline: BaselineKind = BaselineKind.NONE,
    pool_width: int | None = None,
) -> Checkpoint:
    arrays = {name: t.data.astype(STORED_DTYPE) for name, t in model.params.items()}
    manifest = CheckpointManifest(
        format_version=FORMAT_VERSION,
        model=model.config,
        phase=phase,
        step=step,
        target_cr=target_cr,
        achieved_cr=achieved_cr,
        val_loss=val_loss,
        seed=seed,
        rng_state=rng_state,
        baseline=baseline,
        pool_width=pool_width,
    )
    return Checkpoint(manifest, arrays)

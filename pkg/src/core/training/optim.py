"""AdamW with decoupled weight decay and global-norm gradient clipping."""

from __future__ import annotations

import logging
import math

import numpy as np

from app.errors import NumericalAbortError
from core.dtos import OptimizerConfig
from core.model.weights import Params

logger = logging.getLogger(__name__)


class AdamW:
    """
    Per-parameter first/second moment estimates keyed by parameter name.

    Weight decay applies to matrices only; norm gains are left alone.
    """

    def __init__(self, config: OptimizerConfig) -> None:
        self.config = config
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def reset(self) -> None:
        self.step_count = 0
        self.m.clear()
        self.v.clear()

    @staticmethod
    def global_norm(params: Params) -> float:
        total = 0.0
        for t in params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self, params: Params, *, lr_mult: float = 1.0) -> float:
        """Apply one update from the accumulated `.grad` slots; returns the pre-clip norm."""
        cfg = self.config
        norm = self.global_norm(params)
        if not math.isfinite(norm):
            raise NumericalAbortError("gradient norm is not finite", details={"norm": norm})
        scale = 1.0
        if cfg.grad_clip is not None and norm > cfg.grad_clip:
            scale = cfg.grad_clip / (norm + 1e-12)

        self.step_count += 1
        lr = cfg.lr * lr_mult
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        for name, t in params.items():
            if t.grad is None or not t.requires_grad:
                continue
            g = t.grad * scale
            m = self.m.setdefault(name, np.zeros_like(t.data))
            v = self.v.setdefault(name, np.zeros_like(t.data))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            if cfg.weight_decay and t.ndim >= 2 and lr:
                t.data -= lr * cfg.weight_decay * t.data
            t.data -= (lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)).astype(t.dtype)
        return norm


def zero_grads(params: Params) -> None:
    for t in params.values():
        t.zero_grad()

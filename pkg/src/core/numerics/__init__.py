"""Deterministic differentiable-array substrate: tensors, tape, ops, gradient checking."""

from core.numerics.gradcheck import gradcheck
from core.numerics.ops import (
    IGNORE_INDEX,
    cross_entropy_lm,
    log_sigmoid,
    matmul,
    sigmoid,
    softmax_masked,
)
from core.numerics.tensor import Tape, Tensor

__all__ = [
    "IGNORE_INDEX",
    "Tape",
    "Tensor",
    "cross_entropy_lm",
    "gradcheck",
    "log_sigmoid",
    "matmul",
    "sigmoid",
    "softmax_masked",
]

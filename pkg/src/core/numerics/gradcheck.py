"""Central-difference gradient checking against tape gradients."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from app.errors import DimensionError, EvaluationError
from core.numerics.tensor import Tape, Tensor


def _evaluate(f: Callable[[Tensor], Tensor], x: Tensor) -> float:
    value = f(x)
    if value.size != 1:
        raise DimensionError(f"gradcheck needs a scalar-valued function, got shape {value.shape}")
    result = value.item()
    if not np.isfinite(result):
        raise EvaluationError(f"function evaluated to {result}")
    return result


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    """Gradient of scalar f at x from the recorded tape."""
    leaf = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    with Tape() as tape:
        value = f(leaf)
    if value.size != 1:
        raise DimensionError(f"gradcheck needs a scalar-valued function, got shape {value.shape}")
    if not np.isfinite(value.item()):
        raise EvaluationError(f"function evaluated to {value.item()}")
    tape.backward(value)
    return np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    base = x.data.astype(np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _evaluate(f, Tensor(base.copy(), dtype=x.dtype))
        flat[i] = orig - eps
        f_minus = _evaluate(f, Tensor(base.copy(), dtype=x.dtype))
        flat[i] = orig
        grad.reshape(-1)[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def gradcheck(
    f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6, *, normwise: bool = False
) -> float:
    """
    Max over coordinates of |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).

    With `normwise` the error is ||g_fd - g_an|| / max(1e-8, ||g_fd|| + ||g_an||) instead,
    which does not blow up on coordinates whose gradient happens to sit near zero.
    Run in float64; float32 inputs make the finite differences meaningless at small eps.
    """
    g_an = analytic_grad(f, x).astype(np.float64)
    g_fd = numeric_grad(f, x, eps)
    if normwise:
        scale = np.linalg.norm(g_fd) + np.linalg.norm(g_an)
        return float(np.linalg.norm(g_fd - g_an) / max(1e-8, scale))
    rel = np.abs(g_fd - g_an) / np.maximum(1e-8, np.abs(g_fd) + np.abs(g_an))
    return float(rel.max()) if rel.size else 0.0

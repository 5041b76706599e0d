"""Fixed memory pooling: every `pool_width` consecutive tokens share one slot."""

from __future__ import annotations

import numpy as np

from app.errors import PreconditionError


def _check_width(pool_width: int) -> None:
    if pool_width < 1:
        raise PreconditionError(f"pool_width must be at least 1, got {pool_width}")


def fixed_pool(
    k: np.ndarray, v: np.ndarray, pool_width: int
) -> tuple[np.ndarray, np.ndarray]:
    """Unweighted mean over disjoint groups; a trailing partial group averages what it has."""
    _check_width(pool_width)
    k = np.asarray(k)
    v = np.asarray(v)
    n = k.shape[0]
    starts = np.arange(0, n, pool_width)
    counts = np.minimum(pool_width, n - starts)[:, None]
    return np.add.reduceat(k, starts, axis=0) / counts, np.add.reduceat(v, starts, axis=0) / counts


def fixed_pool_decisions(n: int, pool_width: int) -> tuple[np.ndarray, np.ndarray]:
    """Scripted (alpha, omega) that make the DMC cache pool every `pool_width` tokens."""
    _check_width(pool_width)
    t = np.arange(n)
    alpha = (t % pool_width != 0).astype(np.float64)
    return alpha, np.ones(n, dtype=np.float64)

"""
Differentiable operations on `Tensor`.

Every op computes its forward value with numpy and registers an exact analytic backward
closure through `make_result`. Broadcasting follows numpy; gradients are summed back to
each input's shape.
"""

from __future__ import annotations

import builtins
import logging
from collections.abc import Sequence
from typing import Any

import numpy as np

from app.errors import DimensionError, TokenIndexError
from core.numerics.tensor import Tensor, as_tensor, make_result

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), backward)


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), backward)


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), backward)


def div(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_result("div", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return make_result("neg", -x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = np.log(x.data)
    return make_result("log", out, (x,), lambda g: (g / x.data,))


def log1m(x: Tensor) -> Tensor:
    """log(1 - x); x == 1 gives exactly -inf (a fully blocked mask entry)."""
    one_minus = 1.0 - x.data
    with np.errstate(divide="ignore"):
        out = np.log(one_minus)

    def backward(g):
        safe = np.where(one_minus > 0, one_minus, 1.0)
        return (np.where(g == 0, 0.0, -g / safe).astype(x.dtype),)

    return make_result("log1m", out, (x,), backward)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, floor).astype(x.dtype, copy=False)
    passes = x.data > floor
    return make_result("clamp_min", out, (x,), lambda g: (g * passes,))


def relu(x: Tensor) -> Tensor:
    return clamp_min(x, 0.0)


# ---------------------------------------------------------------------------
# Sigmoid family
# ---------------------------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def _log_sigmoid_np(x: np.ndarray) -> np.ndarray:
    return (-np.logaddexp(0.0, -x)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)
    return make_result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    """log(1 / (1 + e^-x)) without overflow."""
    out = _log_sigmoid_np(x.data)
    return make_result("log_sigmoid", out, (x,), lambda g: (g * _sigmoid_np(-x.data),))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s
    return make_result("silu", out, (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)),)

    return make_result("sum", out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.size // builtins.max(out.size, 1)

    def backward(g):
        return (np.array(_expand_reduced(g, x.shape, axis, keepdims)) / count,)

    return make_result("mean", out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_result("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index: Any) -> Tensor:
    out = np.array(x.data[index])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result("getitem", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_result("stack", out, tensors, backward)


def shift(x: Tensor, offset: int, axis: int = -1) -> Tensor:
    """
    Move entries along `axis` by `offset` positions, zero-filling the vacated ones.

    out[t] = x[t - offset]; a negative offset shifts toward the start.
    """
    n = x.shape[axis]
    out = np.zeros_like(x.data)
    if builtins.abs(offset) >= n:
        return make_result("shift", out, (x,), lambda g: (np.zeros_like(x.data),))
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if offset >= 0:
        src[axis] = slice(0, n - offset)
        dst[axis] = slice(offset, n)
    else:
        src[axis] = slice(-offset, n)
        dst[axis] = slice(0, n + offset)
    src_t, dst_t = tuple(src), tuple(dst)
    out[dst_t] = x.data[src_t]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[src_t] = g[dst_t]
        return (gx,)

    return make_result("shift", out, (x,), backward)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy.matmul semantics (batched, broadcasting leading dims) with exact gradients."""
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-D operands, got {a.shape} and {b.shape}")
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != inner_b:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    try:
        out2 = np.matmul(a2, b2)
    except ValueError as e:
        raise DimensionError(f"matmul batch extents disagree: {a.shape} @ {b.shape}") from e

    def backward(g):
        g2 = np.reshape(g, out2.shape)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(a.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(b.shape)
        return ga, gb

    out = out2
    if a.ndim == 1:
        out = out.squeeze(-2)
    if b.ndim == 1:
        out = out.squeeze(-1)
    return make_result("matmul", np.asarray(out), (a, b), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenIndexError(f"token id outside vocabulary of size {vocab}")
    out = weight.data[ids]

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return make_result("embedding", out, (weight,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """y = x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    n = x.shape[-1]
    scale = (np.mean(x.data * x.data, axis=-1, keepdims=True) + eps) ** -0.5
    normed = x.data * scale
    out = normed * gain.data

    def backward(g):
        g_gain = _unbroadcast(g * normed, gain.shape)
        gn = g * gain.data
        dot = np.sum(x.data * gn, axis=-1, keepdims=True)
        gx = scale * (gn - (scale * scale / n) * x.data * dot)
        return gx, g_gain

    return make_result("rms_norm", out, (x, gain), backward)


# ---------------------------------------------------------------------------
# Attention-specific ops
# ---------------------------------------------------------------------------


def softmax_masked(
    logits: Tensor, additive_mask: Tensor | np.ndarray, *, return_flag: bool = False
) -> Tensor | tuple[Tensor, bool]:
    """
    Row softmax of `logits + additive_mask` over the last axis.

    Entries whose mask is -inf come out exactly 0. A row with every entry masked is defined
    as all zeros and flagged (the DMC mask always keeps the diagonal, so this means a
    caller bug).
    """
    mask = as_tensor(additive_mask, like=logits)
    try:
        fits = np.broadcast_shapes(logits.shape, mask.shape) == logits.shape
    except ValueError:
        fits = False
    if not fits:
        raise DimensionError(f"mask shape {mask.shape} does not fit logits {logits.shape}")
    z = logits.data + mask.data
    row_max = np.max(z, axis=-1, keepdims=True)
    dead = ~np.isfinite(row_max)
    row_max = np.where(dead, 0.0, row_max)
    with np.errstate(invalid="ignore"):
        e = np.exp(z - row_max)
    e = np.where(np.isnan(e), 0.0, e)
    denom = np.sum(e, axis=-1, keepdims=True)
    p = (e / np.where(denom > 0, denom, 1.0)).astype(logits.dtype, copy=False)
    flagged = bool(dead.any())
    if flagged:
        logger.warning("softmax_masked: %d fully masked row(s) returned as zeros", int(dead.sum()))

    def backward(g):
        gz = p * (g - np.sum(g * p, axis=-1, keepdims=True))
        return gz, _unbroadcast(gz, mask.shape)

    out = make_result("softmax_masked", p, (logits, mask), backward)
    return (out, flagged) if return_flag else out


def dmc_additive_mask(column_log_keep: Tensor) -> Tensor:
    """
    Expand per-key log-visibility values (..., n) to an additive (..., n, n) mask.

    out[i, j] = column_log_keep[j] for j < i, 0 on the diagonal, -inf above it.
    """
    n = column_log_keep.shape[-1]
    lower = np.tril(np.ones((n, n), dtype=bool), k=-1)
    base = np.where(np.eye(n, dtype=bool), 0.0, -np.inf).astype(column_log_keep.dtype)
    col = column_log_keep.data[..., None, :]
    out = np.where(lower, col, base)

    def backward(g):
        return (np.where(lower, g, 0.0).sum(axis=-2),)

    return make_result("dmc_additive_mask", out, (column_log_keep,), backward)


def cross_entropy_lm(
    logits: Tensor, targets: np.ndarray, *, ignore_index: int = IGNORE_INDEX
) -> Tensor:
    """Mean negative log-likelihood of `targets` under softmax(`logits`) over the last axis."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= vocab)):
        raise TokenIndexError(f"target id outside vocabulary of size {vocab}")
    safe_targets = np.where(valid, targets, 0)
    row_max = np.max(logits.data, axis=-1, keepdims=True)
    shifted = logits.data - row_max
    log_z = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    log_probs = shifted - log_z
    picked = np.take_along_axis(log_probs, safe_targets[..., None], axis=-1)[..., 0]
    count = builtins.max(int(valid.sum()), 1)
    loss = -np.sum(np.where(valid, picked, 0.0)) / count
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(log_probs)
        np.put_along_axis(
            probs,
            safe_targets[..., None],
            np.take_along_axis(probs, safe_targets[..., None], axis=-1) - 1.0,
            axis=-1,
        )
        probs *= valid[..., None]
        return (probs * (g / count),)

    return make_result("cross_entropy_lm", out, (logits,), backward)

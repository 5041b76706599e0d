"""
Dense numpy-backed tensor with an optional gradient slot, and the tape that records
differentiable operations for reverse-mode accumulation.

Recording only happens inside an active `Tape` context and only for operations with at
least one input that requires a gradient; everything else (decoding, evaluation) runs
straight on numpy without bookkeeping.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any

import numpy as np

from app.errors import DimensionError

FLOAT_DTYPES = (np.float32, np.float64)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_ACTIVE_TAPE: ContextVar[Tape | None] = ContextVar("active_tape", default=None)


def _as_float_array(data: Any, dtype: Any | None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype.type not in FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Row-major float32/float64 array plus an accumulating `grad` slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self,
        data: Any,
        *,
        requires_grad: bool = False,
        dtype: Any | None = None,
        name: str | None = None,
    ) -> None:
        self.data: np.ndarray = _as_float_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    # --- array facts ---
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def astype(self, dtype: Any) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    # --- gradient slot ---
    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        g = g.astype(self.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # --- operator sugar (delegates to core.numerics.ops) ---
    def __add__(self, other):
        return _ops.add(self, other)

    def __radd__(self, other):
        return _ops.add(other, self)

    def __sub__(self, other):
        return _ops.sub(self, other)

    def __rsub__(self, other):
        return _ops.sub(other, self)

    def __mul__(self, other):
        return _ops.mul(self, other)

    def __rmul__(self, other):
        return _ops.mul(other, self)

    def __truediv__(self, other):
        return _ops.div(self, other)

    def __rtruediv__(self, other):
        return _ops.div(other, self)

    def __neg__(self):
        return _ops.neg(self)

    def __matmul__(self, other):
        return _ops.matmul(self, other)

    def __getitem__(self, index):
        return _ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return _ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return _ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return _ops.reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], tuple | list):
            axes = tuple(axes[0])
        return _ops.transpose(self, axes or None)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """
    Ordered record of executed operations.

    Use as a context manager; operations executed inside the block are appended in
    execution order and `backward` replays them in exact reverse order. One writer per tape.
    """

    def __init__(self) -> None:
        self.entries: list[TapeEntry] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def record(
        self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardFn
    ) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        loss.accumulate_grad(seed)
        for entry in reversed(self.entries):
            g = entry.output.grad
            if g is None:
                continue
            input_grads = entry.backward(g)
            for tensor, ig in zip(entry.inputs, input_grads, strict=True):
                if ig is None or not tensor.requires_grad:
                    continue
                tensor.accumulate_grad(ig)

    def clear(self) -> None:
        self.entries.clear()


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def make_result(
    op: str,
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward: BackwardFn,
) -> Tensor:
    """Wrap `data` as the output of `op` and record it when any input needs a gradient."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs_grad, dtype=data.dtype)
    tape = _ACTIVE_TAPE.get()
    if needs_grad and tape is not None:
        tape.record(op, inputs, out, backward)
    return out


from core.numerics import ops as _ops  # noqa: E402

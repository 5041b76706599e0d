"""Per-head key/value slot storage used by every decode path."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from app.errors import PreconditionError


class KVSlots(Protocol):
    """
    Ordered (key, value) slots for one head; the last slot is mutable in place.

    `z` is the running merge weight of the last slot. Stores that keep no weight ignore it.
    """

    def append(self, k: np.ndarray, v: np.ndarray, z: float | None = None) -> int: ...
    def overwrite_last(self, k: np.ndarray, v: np.ndarray, z: float | None = None) -> None: ...
    def gather(self) -> tuple[np.ndarray, np.ndarray]: ...
    def __len__(self) -> int: ...


class ListSlots:
    """Contiguous growable buffer (capacity doubling); `gather` returns views."""

    def __init__(self, initial_capacity: int = 16) -> None:
        self._capacity = max(1, initial_capacity)
        self._keys: np.ndarray | None = None
        self._values: np.ndarray | None = None
        self._length = 0

    def __len__(self) -> int:
        return self._length

    def _grow(self, k: np.ndarray) -> None:
        if self._keys is None:
            self._keys = np.empty((self._capacity, k.shape[-1]), dtype=k.dtype)
            self._values = np.empty((self._capacity, k.shape[-1]), dtype=k.dtype)
            return
        if self._length == self._keys.shape[0]:
            assert self._values is not None
            self._keys = np.concatenate([self._keys, np.empty_like(self._keys)])
            self._values = np.concatenate([self._values, np.empty_like(self._values)])

    def append(self, k: np.ndarray, v: np.ndarray, z: float | None = None) -> int:
        self._grow(k)
        assert self._keys is not None and self._values is not None
        self._keys[self._length] = k
        self._values[self._length] = v
        self._length += 1
        return self._length - 1

    def overwrite_last(self, k: np.ndarray, v: np.ndarray, z: float | None = None) -> None:
        if self._length == 0:
            raise PreconditionError("overwrite_last on an empty cache")
        assert self._keys is not None and self._values is not None
        self._keys[self._length - 1] = k
        self._values[self._length - 1] = v

    def remove(self, index: int) -> None:
        if not 0 <= index < self._length:
            raise PreconditionError(f"slot {index} outside cache of length {self._length}")
        assert self._keys is not None and self._values is not None
        self._keys[index : self._length - 1] = self._keys[index + 1 : self._length]
        self._values[index : self._length - 1] = self._values[index + 1 : self._length]
        self._length -= 1

    def gather(self) -> tuple[np.ndarray, np.ndarray]:
        if self._keys is None or self._values is None:
            return np.empty((0, 0)), np.empty((0, 0))
        return self._keys[: self._length], self._values[: self._length]


@dataclass
class VanillaHeadCache:
    """One head's uncompressed cache: a slot per token seen."""

    slots: KVSlots = field(default_factory=ListSlots)

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def keys(self) -> np.ndarray:
        return self.slots.gather()[0]

    @property
    def values(self) -> np.ndarray:
        return self.slots.gather()[1]

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        self.slots.append(k, v)

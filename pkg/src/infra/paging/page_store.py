"""
Paged key/value storage.

Every (sequence, layer, head) gets its own `PageTable`, and pages are handed out on demand
from a shared pool, so heads that compress harder simply hold fewer pages. Keys and values
share a slot. The allocator is guarded by a lock; a table itself is owned by one decode
sequence and is not locked.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from app.errors import CapacityError, PreconditionError
from core.dtos import HeadMemory, MemoryReport

logger = logging.getLogger(__name__)

PAGE_SIZE = 32

TableKey = tuple[int, int, int]  # (sequence, layer, head)


@dataclass
class Page:
    page_id: int
    keys: np.ndarray
    values: np.ndarray
    fill: int = 0

    @property
    def capacity(self) -> int:
        return self.keys.shape[0]


@dataclass
class PageTable:
    key: TableKey
    page_ids: list[int] = field(default_factory=list)
    length: int = 0
    z: float = 0.0
    n_seen: int = 0


@dataclass(frozen=True)
class SlotAddress:
    page_id: int
    slot: int


class PagedStore:
    def __init__(
        self,
        head_dim: int,
        *,
        page_size: int = PAGE_SIZE,
        initial_pages: int = 8,
        max_pages: int | None = None,
        grow: bool = True,
        dtype=np.float64,
        audit: bool = False,
    ) -> None:
        if page_size < 1 or initial_pages < 1:
            raise PreconditionError("page_size and initial_pages must be positive")
        self.head_dim = head_dim
        self.page_size = page_size
        self.max_pages = max_pages
        self.grow = grow
        self.dtype = dtype
        self.audit = audit
        self._lock = threading.Lock()
        self._pages: list[Page] = []
        self._free: list[int] = []
        self._owner: dict[int, TableKey] = {}
        self.tables: dict[TableKey, PageTable] = {}
        self.peak_allocated = 0
        self._add_pages(initial_pages if max_pages is None else min(initial_pages, max_pages))

    # --- pool ---

    @property
    def pool_size(self) -> int:
        return len(self._pages)

    @property
    def free_pages(self) -> int:
        return len(self._free)

    @property
    def allocated_pages(self) -> int:
        return self.pool_size - self.free_pages

    def _add_pages(self, count: int) -> None:
        start = len(self._pages)
        for page_id in range(start, start + count):
            shape = (self.page_size, self.head_dim)
            self._pages.append(
                Page(page_id, np.empty(shape, dtype=self.dtype), np.empty(shape, dtype=self.dtype))
            )
        # lowest ids are handed out first
        self._free = list(range(start + count - 1, start - 1, -1)) + self._free

    def _allocate(self, table: PageTable) -> int:
        with self._lock:
            if not self._free:
                size = self.pool_size
                target = size * 2 if self.max_pages is None else min(size * 2, self.max_pages)
                if not self.grow or target <= size:
                    raise CapacityError(
                        f"page pool exhausted ({size} pages)",
                        details={"pool_pages": size, "max_pages": self.max_pages},
                    )
                logger.debug("growing page pool from %d to %d pages", size, target)
                self._add_pages(target - size)
            page_id = self._free.pop()
            self._owner[page_id] = table.key
            self._pages[page_id].fill = 0
            self.peak_allocated = max(self.peak_allocated, self.allocated_pages)
            return page_id

    def _release_page(self, page_id: int) -> None:
        with self._lock:
            self._owner.pop(page_id, None)
            self._pages[page_id].fill = 0
            self._free.append(page_id)

    # --- tables ---

    def open_table(self, key: TableKey) -> PageTable:
        table = self.tables.get(key)
        if table is None:
            table = PageTable(key)
            self.tables[key] = table
        return table

    def release(self, table: PageTable) -> None:
        for page_id in table.page_ids:
            self._release_page(page_id)
        table.page_ids.clear()
        table.length = 0
        table.z = 0.0
        self.tables.pop(table.key, None)
        if self.audit:
            self.audit_ownership()

    def append(
        self, table: PageTable, k: np.ndarray, v: np.ndarray, z: float | None = None
    ) -> SlotAddress:
        if table.length == len(table.page_ids) * self.page_size:
            table.page_ids.append(self._allocate(table))
        page = self._pages[table.page_ids[-1]]
        slot = table.length % self.page_size
        page.keys[slot] = k
        page.values[slot] = v
        page.fill = slot + 1
        table.length += 1
        table.n_seen += 1
        if z is not None:
            table.z = z
        return SlotAddress(page.page_id, slot)

    def overwrite_last(
        self, table: PageTable, k: np.ndarray, v: np.ndarray, z_new: float | None = None
    ) -> None:
        if table.length == 0:
            raise PreconditionError("overwrite_last on an empty page table")
        page = self._pages[table.page_ids[(table.length - 1) // self.page_size]]
        slot = (table.length - 1) % self.page_size
        page.keys[slot] = k
        page.values[slot] = v
        if z_new is not None:
            table.z = z_new
        table.n_seen += 1

    def gather(self, table: PageTable) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous copies of the first `length` slots in logical order."""
        if table.length == 0:
            empty = np.empty((0, self.head_dim), dtype=self.dtype)
            return empty, empty.copy()
        keys = []
        values = []
        remaining = table.length
        for page_id in table.page_ids:
            take = min(remaining, self.page_size)
            page = self._pages[page_id]
            keys.append(page.keys[:take])
            values.append(page.values[:take])
            remaining -= take
            if remaining == 0:
                break
        return np.concatenate(keys), np.concatenate(values)

    # --- accounting ---

    def memory_report(self) -> MemoryReport:
        heads = []
        for (sequence, layer, head), table in sorted(self.tables.items()):
            pages = len(table.page_ids)
            allocated = pages * self.page_size
            heads.append(
                HeadMemory(
                    sequence=sequence,
                    layer=layer,
                    head=head,
                    logical=table.length,
                    pages=pages,
                    allocated_slots=allocated,
                    overhead=allocated / table.length if table.length else 1.0,
                    n_seen=table.n_seen,
                )
            )
        total_logical = sum(h.logical for h in heads)
        total_allocated = sum(h.allocated_slots for h in heads)
        return MemoryReport(
            page_size=self.page_size,
            heads=heads,
            total_logical=total_logical,
            total_allocated_slots=total_allocated,
            total_pages=sum(h.pages for h in heads),
            vanilla_equivalent=sum(h.n_seen for h in heads),
            overhead=total_allocated / total_logical if total_logical else 1.0,
            pool_pages=self.pool_size,
            free_pages=self.free_pages,
        )

    def slot_factory(self, sequence: int = 0):
        return paged_slot_factory(self, sequence)

    def audit_ownership(self) -> None:
        """Raise if a page is shared between tables or the page counts drift."""
        seen: dict[int, TableKey] = {}
        for key, table in self.tables.items():
            if len(table.page_ids) != math.ceil(table.length / self.page_size):
                raise PreconditionError(
                    f"table {key} holds {len(table.page_ids)} pages for {table.length} slots"
                )
            for page_id in table.page_ids:
                if page_id in seen:
                    raise PreconditionError(
                        f"page {page_id} referenced by {seen[page_id]} and {key}"
                    )
                if self._owner.get(page_id) != key:
                    raise PreconditionError(f"page {page_id} is not owned by {key}")
                seen[page_id] = key
        if len(seen) + self.free_pages != self.pool_size:
            raise PreconditionError(
                f"{len(seen)} allocated + {self.free_pages} free != pool of {self.pool_size}"
            )


class PagedSlots:
    """`KVSlots` view of one page table, so decode caches can live in a `PagedStore`."""

    def __init__(self, store: PagedStore, key: TableKey) -> None:
        self.store = store
        self.table = store.open_table(key)

    def __len__(self) -> int:
        return self.table.length

    def append(self, k: np.ndarray, v: np.ndarray, z: float | None = None) -> int:
        self.store.append(self.table, k, v, z)
        return self.table.length - 1

    def overwrite_last(self, k: np.ndarray, v: np.ndarray, z: float | None = None) -> None:
        self.store.overwrite_last(self.table, k, v, z)

    def gather(self) -> tuple[np.ndarray, np.ndarray]:
        return self.store.gather(self.table)


def paged_slot_factory(store: PagedStore, sequence: int = 0):
    """Slot factory for `VanillaCaches` / `DMCCaches` backed by `store`."""

    def make(layer: int, head: int) -> PagedSlots:
        return PagedSlots(store, (sequence, layer, head))

    return make

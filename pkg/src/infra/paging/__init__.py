from infra.paging.page_store import (
    PAGE_SIZE,
    Page,
    PagedSlots,
    PagedStore,
    PageTable,
    paged_slot_factory,
)

__all__ = ["PAGE_SIZE", "Page", "PageTable", "PagedSlots", "PagedStore", "paged_slot_factory"]

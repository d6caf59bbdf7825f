from __future__ import annotations

import bisect
from dataclasses import dataclass, replace
from typing import Literal

from shadow_worlds.common.layout import USER_TOP
from shadow_worlds.common.utils import PAGE_SIZE, page_ceil, page_floor

MappingKind = Literal["anon", "library", "file", "shared", "protected"]
Region = Literal["segment", "stack", "heap", "reserved"]


@dataclass(frozen=True)
class Mapping:
    start: int
    length: int
    kind: MappingKind = "anon"
    prot: int = 0
    path: str | None = None
    offset: int = 0

    @property
    def end(self) -> int:
        return self.start + self.length


class MemoryMapTracker:
    """Verified view of a HAP's address space.

    Fixed intervals (image segments, reserved pages), the stack from `stack_low` to the top
    of user space, the heap from `heap_start` to `brk_limit`, and disjoint mmap mappings.
    """

    def __init__(
        self,
        fixed: list[tuple[int, int]],
        heap_start: int,
        stack_low: int,
        reserved: list[tuple[int, int]] | None = None,
    ) -> None:
        self.fixed = sorted(fixed)
        self.reserved = sorted(reserved or [])
        self.heap_start = heap_start
        self.brk_limit = heap_start
        self.stack_low = stack_low
        self.mappings: list[Mapping] = []
        self._starts: list[int] = []

    @classmethod
    def for_layout(
        cls,
        segments: list[tuple[int, int]],
        initial_sp: int,
        reserved: list[tuple[int, int]] | None = None,
    ) -> MemoryMapTracker:
        """Tracker for a freshly loaded image; the stack starts at the page holding sp."""
        heap_start = page_ceil(max(a + n for a, n in segments))
        return cls(segments, heap_start, page_floor(initial_sp), reserved)

    # --- queries -------------------------------------------------------------

    def _hits_mapping(self, start: int, end: int) -> bool:
        i = bisect.bisect_left(self._starts, end)
        return i > 0 and self.mappings[i - 1].end > start

    def overlaps(
        self, start: int, length: int, include_heap: bool = True, include_mappings: bool = True
    ) -> bool:
        end = start + length
        if end > self.stack_low:
            return True
        for a, n in (*self.fixed, *self.reserved):
            if start < a + n and a < end:
                return True
        heap_end = page_ceil(self.brk_limit)
        heap_live = include_heap and self.heap_start < heap_end
        if heap_live and start < heap_end and self.heap_start < end:
            return True
        return include_mappings and self._hits_mapping(start, end)

    def find(self, vaddr: int) -> Mapping | None:
        i = bisect.bisect_right(self._starts, vaddr)
        if i > 0 and self.mappings[i - 1].end > vaddr:
            return self.mappings[i - 1]
        return None

    def region_of(self, vaddr: int) -> Region | Mapping | None:
        if self.stack_low <= vaddr < USER_TOP:
            return "stack"
        for a, n in self.reserved:
            if a <= vaddr < a + n:
                return "reserved"
        for a, n in self.fixed:
            if a <= vaddr < a + n:
                return "segment"
        if self.heap_start <= vaddr < page_ceil(self.brk_limit):
            return "heap"
        return self.find(vaddr)

    # --- mmap / munmap -------------------------------------------------------

    def check_mmap(self, addr: int, length: int) -> bool:
        if length <= 0 or addr % PAGE_SIZE or addr < PAGE_SIZE:
            return False
        return not self.overlaps(addr, page_ceil(length))

    def check_fixed(self, addr: int, length: int) -> bool:
        """MAP_FIXED may replace earlier mmap mappings and nothing else."""
        if length <= 0 or addr % PAGE_SIZE or addr < PAGE_SIZE:
            return False
        return not self.overlaps(addr, page_ceil(length), include_mappings=False)

    def add_mapping(self, mapping: Mapping) -> None:
        mapping = replace(mapping, length=page_ceil(mapping.length))
        i = bisect.bisect_left(self._starts, mapping.start)
        self.mappings.insert(i, mapping)
        self._starts.insert(i, mapping.start)

    def remove(self, addr: int, length: int) -> list[Mapping]:
        """Drop [addr, addr + length) from the mappings; returns the removed pieces."""
        end = addr + page_ceil(length)
        kept: list[Mapping] = []
        removed: list[Mapping] = []
        for m in self.mappings:
            if m.end <= addr or m.start >= end:
                kept.append(m)
                continue
            lo, hi = max(m.start, addr), min(m.end, end)
            removed.append(replace(m, start=lo, length=hi - lo, offset=m.offset + lo - m.start))
            if m.start < lo:
                kept.append(replace(m, length=lo - m.start))
            if hi < m.end:
                kept.append(replace(m, start=hi, length=m.end - hi, offset=m.offset + hi - m.start))
        self.mappings = kept
        self._starts = [m.start for m in kept]
        return removed

    # --- brk -----------------------------------------------------------------

    def check_brk(self, new_limit: int) -> bool:
        if new_limit < self.heap_start or new_limit >= self.stack_low:
            return False
        grow_from = page_ceil(self.brk_limit)
        grow_to = page_ceil(new_limit)
        if grow_to <= grow_from:
            return True
        return not self.overlaps(grow_from, grow_to - grow_from, include_heap=False)

    def set_brk(self, new_limit: int) -> tuple[int, int] | None:
        """Move the break; returns the page span a shrink gives up."""
        lo = max(page_ceil(new_limit), self.heap_start)
        hi = page_ceil(self.brk_limit)
        self.brk_limit = new_limit
        return (lo, hi - lo) if lo < hi else None

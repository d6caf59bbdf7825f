import heapq

from shadow_worlds.common.errors import SimulatorError
from shadow_worlds.common.utils import PAGE_SIZE


class PageAllocator:
    """Lowest-address-first page allocator over one physical range.

    Freed pages are reused before the bump cursor advances, so runs are reproducible.
    """

    def __init__(self, start: int, end: int, name: str) -> None:
        if start % PAGE_SIZE or end % PAGE_SIZE or end <= start:
            raise ValueError(f"Bad {name} range {start:#x}..{end:#x}")
        self.start = start
        self.end = end
        self.name = name
        self._cursor = start
        self._free: list[int] = []
        self._live: set[int] = set()

    def alloc(self, pages: int = 1) -> int:
        if pages == 1 and self._free:
            page = heapq.heappop(self._free)
        else:
            if self._cursor + pages * PAGE_SIZE > self.end:
                raise SimulatorError(f"{self.name} allocator exhausted")
            page = self._cursor
            self._cursor += pages * PAGE_SIZE
        for i in range(pages):
            self._live.add(page + i * PAGE_SIZE)
        return page

    def free(self, page: int) -> None:
        if page not in self._live:
            return
        self._live.discard(page)
        heapq.heappush(self._free, page)

    def owns(self, page: int) -> bool:
        return self.start <= page < self.end

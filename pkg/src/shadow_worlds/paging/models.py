from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Annotated, Any, Literal

from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass as pyd_dataclass

from shadow_worlds.common.utils import PAGE_SIZE

PageKind = Literal["anon", "image", "library", "file", "shared", "protected", "sigframe"]
Perms = Literal["r", "w", "x"]


@dataclass
class PageEntry:
    phys: int
    perms: frozenset[str]
    kind: PageKind
    shared: bool = False
    n_page: int | None = None

    def allows(self, access: str) -> bool:
        return access in self.perms


@dataclass
class TrustedPageTable:
    entries: dict[int, PageEntry] = field(default_factory=dict)

    def lookup(self, vaddr: int) -> PageEntry | None:
        return self.entries.get(vaddr - vaddr % PAGE_SIZE)

    def install(self, vaddr: int, entry: PageEntry) -> None:
        self.entries[vaddr - vaddr % PAGE_SIZE] = entry

    def remove(self, vaddr: int) -> PageEntry | None:
        return self.entries.pop(vaddr - vaddr % PAGE_SIZE, None)

    def in_range(self, start: int, length: int) -> list[int]:
        return sorted(v for v in self.entries if start <= v < start + length)


@pyd_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class HashEntry:
    key: Annotated[int, Field(ge=0)]
    digest: bytes

    def to_dict(self) -> dict[str, Any]:
        return {"key": self.key, "digest": self.digest.hex()}


@pyd_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class IntegrityList:
    """(vaddr, sha256) per loadable page, sorted by vaddr."""

    entries: tuple[HashEntry, ...] = ()

    def lookup(self, vaddr: int) -> bytes | None:
        keys = [e.key for e in self.entries]
        i = bisect.bisect_left(keys, vaddr)
        if i < len(keys) and keys[i] == vaddr:
            return self.entries[i].digest
        return None

    def __len__(self) -> int:
        return len(self.entries)


@pyd_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class LibraryHashList:
    """(file offset, sha256) per page of a shared library."""

    name: str
    entries: tuple[HashEntry, ...] = ()

    def lookup(self, offset: int) -> bytes | None:
        for e in self.entries:
            if e.key == offset:
                return e.digest
        return None


@dataclass
class FreshPageLedger:
    """Secure pages currently installed in some trusted table."""

    allocated: set[int] = field(default_factory=set)

    def __contains__(self, phys: int) -> bool:
        return phys in self.allocated

    def add(self, phys: int) -> None:
        self.allocated.add(phys)

    def release(self, phys: int) -> None:
        self.allocated.discard(phys)

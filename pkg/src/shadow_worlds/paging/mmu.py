from collections.abc import Callable

from shadow_worlds.common.utils import PAGE_SIZE
from shadow_worlds.guest.interpreter import GuestFault
from shadow_worlds.machine.machine import Machine
from shadow_worlds.machine.models import LABEL_SECRET, TBytes
from shadow_worlds.paging.models import TrustedPageTable
from shadow_worlds.runtime.models import Access


class HapMemory:
    """Guest view of memory through one HAP's trusted page table."""

    def __init__(
        self,
        machine: Machine,
        table: TrustedPageTable,
        on_secret: Callable[[bytes], None] | None = None,
    ) -> None:
        self.machine = machine
        self.table = table
        self.on_secret = on_secret

    def translate(self, vaddr: int, length: int, access: Access) -> list[tuple[int, int]]:
        """(phys, length) runs covering the range; raises GuestFault at the first gap."""
        runs: list[tuple[int, int]] = []
        pos = vaddr
        end = vaddr + max(length, 1)
        while pos < end:
            entry = self.table.lookup(pos)
            if entry is None or not entry.allows(access):
                raise GuestFault(pos, access)
            off = pos % PAGE_SIZE
            n = min(PAGE_SIZE - off, end - pos)
            runs.append((entry.phys + off, n))
            pos += n
        if length == 0:
            return []
        return runs

    def read(self, vaddr: int, length: int, access: Access) -> TBytes:
        out = TBytes.clean(b"")
        for phys, n in self.translate(vaddr, length, access):
            out = out + self.machine.phys_read_t(phys, n, "secure")
        return out

    def write(self, vaddr: int, data: TBytes) -> None:
        pos = 0
        for phys, n in self.translate(vaddr, len(data), "w"):
            self.machine.phys_write(phys, data[pos : pos + n], "secure")
            pos += n

    def mark_secret(self, vaddr: int, length: int) -> None:
        runs = self.translate(vaddr, length, "r")
        for phys, n in runs:
            self.machine.set_labels(phys, n, LABEL_SECRET)
        if self.on_secret is not None:
            self.on_secret(b"".join(self.machine.phys_read(p, n, "secure") for p, n in runs))

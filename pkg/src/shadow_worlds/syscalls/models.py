from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Final

from shadow_worlds.common.layout import (
    FRAME_HANDLER,
    FRAME_PRETCODE,
    FRAME_RETURN_PC,
    FRAME_SIGNUM,
    FRAME_SIZE,
    FUTEX_WORD_OFFSET,
    MARSHAL_DATA_SIZE,
    SIGNAL_PAGE_OFFSET,
)

_U32 = struct.Struct("<I")
PRETCODE_LEN: Final = 8


@dataclass(frozen=True)
class MarshalBuffer:
    """Per-HAP world-shared area in ZONE_NORMAL."""

    base: int
    data_size: int = MARSHAL_DATA_SIZE

    @property
    def data(self) -> int:
        return self.base

    @property
    def signal_page(self) -> int:
        return self.base + SIGNAL_PAGE_OFFSET

    @property
    def futex_word(self) -> int:
        return self.base + FUTEX_WORD_OFFSET


@dataclass
class OutBuffer:
    """Guest buffer to fill from the marshal area once the OS answers."""

    guest_vaddr: int
    marshal_addr: int
    capacity: int


@dataclass
class MarshaledCall:
    number: int
    name: str
    guest_args: tuple[int, ...]
    args: tuple[int, ...]
    out: OutBuffer | None = None
    staged: int = 0
    fd: int | None = None
    path: str | None = None
    internal: bool = False


@dataclass(frozen=True)
class SignalFrame:
    signum: int
    handler: int
    return_pc: int
    pretcode: bytes

    def pack(self) -> bytes:
        out = bytearray(FRAME_SIZE)
        _U32.pack_into(out, FRAME_SIGNUM, self.signum)
        _U32.pack_into(out, FRAME_HANDLER, self.handler)
        _U32.pack_into(out, FRAME_RETURN_PC, self.return_pc)
        out[FRAME_PRETCODE : FRAME_PRETCODE + len(self.pretcode)] = self.pretcode
        return bytes(out)

    @classmethod
    def unpack(cls, raw: bytes) -> SignalFrame:
        return cls(
            signum=_U32.unpack_from(raw, FRAME_SIGNUM)[0],
            handler=_U32.unpack_from(raw, FRAME_HANDLER)[0],
            return_pc=_U32.unpack_from(raw, FRAME_RETURN_PC)[0],
            pretcode=bytes(raw[FRAME_PRETCODE : FRAME_PRETCODE + PRETCODE_LEN]),
        )


@dataclass
class FutexMap:
    """Physical address of a futex word -> waiting (hap_id, vaddr) pairs."""

    waiters: dict[int, set[tuple[int, int]]] = field(default_factory=dict)

    def register(self, phys: int, hap_id: int, vaddr: int) -> None:
        self.unregister(hap_id)
        self.waiters.setdefault(phys, set()).add((hap_id, vaddr))

    def unregister(self, hap_id: int) -> None:
        for phys in list(self.waiters):
            self.waiters[phys] = {w for w in self.waiters[phys] if w[0] != hap_id}
            if not self.waiters[phys]:
                del self.waiters[phys]

    def waiting_on(self, phys: int) -> list[tuple[int, int]]:
        return sorted(self.waiters.get(phys, set()))

    def registrations(self, hap_id: int) -> int:
        return sum(1 for ws in self.waiters.values() for w in ws if w[0] == hap_id)

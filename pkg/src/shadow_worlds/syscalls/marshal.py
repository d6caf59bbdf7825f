from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Protocol

from shadow_worlds.common.errors import SyscallError, Violation
from shadow_worlds.common.layout import EINVAL, ENAMETOOLONG, ENOSYS, MAX_PATH, SYS_MMAP
from shadow_worlds.common.utils import PAGE_SIZE, setup_logging
from shadow_worlds.machine.models import LABEL_DISCLOSED, LABEL_SECRET, TBytes
from shadow_worlds.syscalls.models import MarshaledCall, OutBuffer
from shadow_worlds.syscalls.table import lookup

if TYPE_CHECKING:
    from shadow_worlds.machine.machine import Machine
    from shadow_worlds.runtime.models import Hap

setup_logging()
logger = logging.getLogger(__name__)

FD_ARG: dict[str, int] = {"read": 0, "write": 0, "close": 0, "mmap": 4}


class GuestAccess(Protocol):
    """Runtime-side copies to and from a HAP's secure pages, faulting pages in as needed."""

    machine: Machine
    verify: bool

    def copy_in(self, hap: Hap, vaddr: int, length: int) -> TBytes: ...

    def copy_out(self, hap: Hap, vaddr: int, data: TBytes) -> None: ...


def read_path(rt: GuestAccess, hap: Hap, vaddr: int) -> bytes:
    out = bytearray()
    pos = vaddr
    while len(out) <= MAX_PATH:
        chunk = rt.copy_in(hap, pos, PAGE_SIZE - pos % PAGE_SIZE).data
        nul = chunk.find(b"\0")
        if nul >= 0:
            out += chunk[:nul]
            break
        out += chunk
        pos += len(chunk)
    if len(out) >= MAX_PATH:
        raise SyscallError(ENAMETOOLONG, "path argument too long")
    return bytes(out)


def stage(machine: Machine, addr: int, data: TBytes) -> None:
    """Copy into the world-shared area; secret bytes become explicitly disclosed."""
    machine.phys_write(addr, data.relabel(LABEL_SECRET, LABEL_DISCLOSED), "secure")
    machine.metrics.bytes_copied_cross_world += len(data)


def marshal_request(
    rt: GuestAccess, hap: Hap, number: int, guest_args: tuple[int, ...]
) -> MarshaledCall:
    spec = lookup(number)
    if spec is None:
        raise SyscallError(ENOSYS, f"syscall {number} is not supported")
    gargs = tuple(guest_args) + (0,) * (7 - len(guest_args))
    args = list(gargs)
    marshal = hap.marshal
    cursor = marshal.data
    limit = marshal.data + marshal.data_size
    path: str | None = None
    staged = 0

    for idx in spec.paths:
        raw = read_path(rt, hap, gargs[idx])
        stage(rt.machine, cursor, TBytes.clean(raw + b"\0"))
        if path is None:
            path = raw.decode("utf-8", errors="replace")
        args[idx] = cursor
        cursor += len(raw) + 1
        staged += len(raw) + 1

    if spec.in_buf is not None:
        ptr, ln = spec.in_buf
        n = gargs[ln]
        if cursor + n > limit:
            raise SyscallError(EINVAL, f"{spec.name} buffer exceeds the marshal area")
        if n:
            stage(rt.machine, cursor, rt.copy_in(hap, gargs[ptr], n))
        args[ptr] = cursor
        cursor += n
        staged += n

    out = None
    if spec.out_buf is not None:
        ptr, ln = spec.out_buf
        n = gargs[ln]
        if cursor + n > limit:
            raise SyscallError(EINVAL, f"{spec.name} buffer exceeds the marshal area")
        out = OutBuffer(guest_vaddr=gargs[ptr], marshal_addr=cursor, capacity=n)
        args[ptr] = cursor

    fd_arg = FD_ARG.get(spec.name)
    fd = gargs[fd_arg] if fd_arg is not None else None
    if number == SYS_MMAP and fd is not None:
        path = hap.private.fd_paths.get(fd)
    return MarshaledCall(
        number=number,
        name=spec.name,
        guest_args=gargs,
        args=tuple(args),
        out=out,
        staged=staged,
        fd=fd,
        path=path,
    )


def demarshal_response(rt: GuestAccess, hap: Hap, call: MarshaledCall, result: int) -> None:
    """Copy out-buffers back into secure memory once the result has been verified."""
    if call.out is None or result <= 0:
        return
    n = result
    if n > call.out.capacity:
        if rt.verify:
            raise Violation("BoundsViolation", f"{call.name} returned {n} > {call.out.capacity}")
        n = min(n, hap.marshal.data + hap.marshal.data_size - call.out.marshal_addr)
    data = rt.machine.phys_read_t(call.out.marshal_addr, n, "secure")
    rt.machine.metrics.bytes_copied_cross_world += n
    rt.copy_out(hap, call.out.guest_vaddr, data)

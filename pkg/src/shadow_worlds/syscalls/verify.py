"""Result checks applied to every OS answer before the guest sees it."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

from shadow_worlds.common.errors import Violation
from shadow_worlds.common.layout import (
    FUTEX_WAIT,
    MAP_ANONYMOUS,
    MAP_FIXED,
    MAP_SHARED,
    MAP_TZ_VAULT,
)
from shadow_worlds.common.utils import page_ceil, setup_logging, to_signed32
from shadow_worlds.syscalls.models import MarshaledCall
from shadow_worlds.syscalls.table import lookup
from shadow_worlds.syscalls.tracker import Mapping, MappingKind

if TYPE_CHECKING:
    from shadow_worlds.runtime.models import Hap

setup_logging()
logger = logging.getLogger(__name__)

MAX_ERRNO = 4095
MAX_FD = 1 << 16


@dataclass(frozen=True)
class VerifiedResponse:
    result: int
    mapping: Mapping | None = None
    released: tuple[int, int] | None = None


def is_errno(value: int) -> bool:
    return -MAX_ERRNO <= to_signed32(value) < 0


def _bad(call: MarshaledCall, result: int, why: str) -> Violation:
    return Violation("BadResponse", f"{call.name} -> {to_signed32(result)}: {why}")


def mapping_kind(call: MarshaledCall, is_library: bool) -> MappingKind:
    flags = call.guest_args[3]
    if flags & MAP_TZ_VAULT:
        return "protected"
    if flags & MAP_ANONYMOUS or call.path is None:
        return "anon"
    if is_library:
        return "library"
    return "shared" if flags & MAP_SHARED else "file"


def verify_response(
    hap: Hap, call: MarshaledCall, raw_result: int, verify: bool = True, is_library: bool = False
) -> VerifiedResponse:
    """Check one OS result against the HAP's verified state; updates the map tracker."""
    spec = lookup(call.number)
    if spec is None:
        raise Violation("BadResponse", f"no verifier for syscall {call.number}")
    result = raw_result & 0xFFFFFFFF
    signed = to_signed32(result)
    tracker = hap.tracker
    check = spec.result

    if check == "addr":
        if is_errno(result):
            return VerifiedResponse(signed)
        addr, length = result, call.guest_args[1]
        fixed = bool(call.guest_args[3] & MAP_FIXED)
        if verify:
            if fixed and addr != call.guest_args[0]:
                raise _bad(call, result, "MAP_FIXED ignored")
            fits = tracker.check_fixed(addr, length) if fixed else tracker.check_mmap(addr, length)
            if not fits:
                raise Violation("OverlapMapping", f"mmap result {addr:#010x}+{length:#x}")
        released = None
        if fixed:
            tracker.remove(addr, length)
            released = (addr, page_ceil(length))
        mapping = Mapping(
            start=addr,
            length=length,
            kind=mapping_kind(call, is_library),
            prot=call.guest_args[2],
            path=call.path,
            offset=call.guest_args[5],
        )
        tracker.add_mapping(mapping)
        return VerifiedResponse(result, mapping, released)

    if check == "brk":
        requested = call.guest_args[0]
        if requested == 0:
            if verify and result != tracker.brk_limit:
                raise Violation("OverlapMapping", f"brk query answered {result:#010x}")
            return VerifiedResponse(result)
        if result == requested:
            if verify and not tracker.check_brk(result):
                raise Violation("OverlapMapping", f"brk grew to {result:#010x}")
            return VerifiedResponse(result, released=tracker.set_brk(result))
        if verify and result != tracker.brk_limit:
            raise _bad(call, result, "neither the new nor the old break")
        return VerifiedResponse(result)

    if not verify:
        return VerifiedResponse(signed)
    if is_errno(result):
        if check == "sigreturn":
            raise _bad(call, result, "sigreturn cannot fail")
        return VerifiedResponse(signed)
    if check == "count" and signed > call.guest_args[2]:
        raise Violation("BoundsViolation", f"{call.name} returned {signed} > {call.guest_args[2]}")
    if check == "fd" and not 0 <= signed < MAX_FD:
        raise _bad(call, result, "not a descriptor")
    if check in ("zero", "sigreturn") and signed != 0:
        raise _bad(call, result, "expected 0")
    if check == "pid" and signed <= 0:
        raise _bad(call, result, "not a pid")
    if check == "futex" and call.guest_args[1] == FUTEX_WAIT and signed != 0:
        raise _bad(call, result, "futex wait returns 0 or -errno")
    if check == "count" or check == "futex":
        if signed < 0:
            raise _bad(call, result, "negative count")
    return VerifiedResponse(signed)

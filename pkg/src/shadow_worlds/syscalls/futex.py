from __future__ import annotations

import struct
from typing import TYPE_CHECKING

from shadow_worlds.common.errors import Violation

if TYPE_CHECKING:
    from shadow_worlds.runtime.models import Hap
    from shadow_worlds.runtime.runtime import Runtime

_U32 = struct.Struct("<I")


def _word_phys(hap: Hap, vaddr: int) -> int:
    entry = hap.page_table.lookup(vaddr)
    if entry is None:
        raise Violation("Segfault", f"futex word {vaddr:#010x} is not mapped")
    return entry.phys + vaddr % 4096


def _sync(rt: Runtime, phys: int, target: Hap) -> int:
    value = rt.machine.phys_read(phys, 4, "secure")
    rt.machine.phys_write(target.marshal.futex_word, value, "secure")
    rt.machine.metrics.bytes_copied_cross_world += 4
    return int(_U32.unpack(value)[0])


def futex_wait(rt: Runtime, hap: Hap, vaddr: int, expected: int) -> int:
    """Publish the current value at the fixed slot and register the waiter."""
    phys = _word_phys(hap, vaddr)
    value = _sync(rt, phys, hap)
    rt.futex_map.register(phys, hap.hap_id, vaddr)
    hap.private.futex_wait_vaddr = vaddr
    rt.machine.trace.append(
        "FUTEX", hap=hap.hap_id, op="wait", vaddr=vaddr, phys=phys, value=value, expected=expected
    )
    return phys


def futex_wake(rt: Runtime, hap: Hap, vaddr: int) -> int:
    """Re-publish the value for every registered waiter before the OS wakes them."""
    phys = _word_phys(hap, vaddr)
    waiters = rt.futex_map.waiting_on(phys)
    for hap_id, _ in waiters:
        waiter = rt.haps.get(hap_id)
        if waiter is not None and waiter.alive:
            _sync(rt, phys, waiter)
    rt.machine.trace.append(
        "FUTEX", hap=hap.hap_id, op="wake", vaddr=vaddr, phys=phys, waiters=len(waiters)
    )
    return len(waiters)


def futex_done(rt: Runtime, hap: Hap) -> None:
    if hap.private.futex_wait_vaddr is None:
        return
    rt.futex_map.unregister(hap.hap_id)
    hap.private.futex_wait_vaddr = None

from __future__ import annotations

import logging
from typing import TYPE_CHECKING

from shadow_worlds.common.errors import SimulatorError, SyscallError, Violation
from shadow_worlds.common.layout import (
    EINVAL,
    FRAME_PRETCODE,
    FRAME_SIZE,
    PRETCODE,
    SIGFRAME_VADDR,
    USER_TOP,
)
from shadow_worlds.common.utils import PAGE_SIZE, setup_logging
from shadow_worlds.paging.faults import release_page
from shadow_worlds.paging.models import PageEntry
from shadow_worlds.syscalls.models import SignalFrame

if TYPE_CHECKING:
    from shadow_worlds.runtime.models import Hap
    from shadow_worlds.runtime.runtime import Runtime

setup_logging()
logger = logging.getLogger(__name__)


def signal_register(rt: Runtime, hap: Hap, signum: int, handler: int) -> None:
    if handler == 0 or handler >= USER_TOP:
        raise SyscallError(EINVAL, f"handler {handler:#010x} outside user space")
    hap.private.registered_signal_handlers[signum] = handler
    rt.machine.trace.append("SIGNAL", hap=hap.hap_id, op="register", signum=signum, handler=handler)


def signal_deliver(rt: Runtime, hap: Hap) -> None:
    """Check the OS-built frame and redirect the restored context to the handler."""
    m = rt.machine
    if hap.private.pending_normal_context is not None and rt.verify:
        raise Violation("NestedSignal", "frame delivered while a handler is running")
    raw = m.phys_read(hap.marshal.signal_page, FRAME_SIZE, "secure")
    frame = SignalFrame.unpack(raw)
    if rt.verify:
        registered = hap.private.registered_signal_handlers.get(frame.signum)
        if registered is None or registered != frame.handler:
            raise Violation(
                "UnregisteredHandler", f"signal {frame.signum} -> {frame.handler:#010x}"
            )
        if frame.pretcode != PRETCODE:
            raise Violation("BadPretcode", f"pretcode {frame.pretcode.hex()}")

    if hap.page_table.lookup(SIGFRAME_VADDR) is not None:
        release_page(rt, hap, SIGFRAME_VADDR)
    if not rt.sigframe_pool:
        raise SimulatorError("Secure signal frame pool exhausted")
    page = rt.sigframe_pool.pop(0)
    m.phys_zero(page, PAGE_SIZE, "secure")
    m.phys_write(page, raw, "secure")
    m.metrics.bytes_copied_cross_world += FRAME_SIZE
    hap.page_table.install(
        SIGFRAME_VADDR, PageEntry(phys=page, perms=frozenset("rx"), kind="sigframe")
    )
    hap.private.sigframe_page = page

    regs = m.regs
    hap.private.pending_normal_context = regs.copy()
    regs.gp[0] = frame.signum
    regs.pc = frame.handler
    regs.lr = SIGFRAME_VADDR + FRAME_PRETCODE
    m.trace.append(
        "SIGNAL", hap=hap.hap_id, op="deliver", signum=frame.signum, handler=frame.handler
    )
    logger.debug(f"HAP {hap.hap_id}: signal {frame.signum} -> {frame.handler:#010x}")


def sigreturn_restore(rt: Runtime, hap: Hap) -> None:
    saved = hap.private.pending_normal_context
    if saved is None:
        raise Violation("SpuriousSigreturn", "no signal is being handled")
    rt.machine.regs.load(saved)
    hap.private.pending_normal_context = None
    if hap.page_table.lookup(SIGFRAME_VADDR) is not None:
        release_page(rt, hap, SIGFRAME_VADDR)
    hap.private.sigframe_page = None
    rt.machine.trace.append("SIGNAL", hap=hap.hap_id, op="return", pc=saved.pc)

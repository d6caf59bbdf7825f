"""Secure-world runtime: context switching, exception dispatch, forwarding and resumption.

A HAP only ever runs while the machine is in the secure world. Anything the runtime cannot
answer itself is re-raised in the normal world at the emulated vector, attributed to the
zombie task, with a scrubbed register file. Every OS answer comes back through TaskShared
and is checked before the guest sees it.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Final, Literal, Protocol

from shadow_worlds.attest.boot import BootedSystem
from shadow_worlds.attest.keys import unwrap_app_key
from shadow_worlds.attest.manifest import Manifest, verify_manifest_bytes
from shadow_worlds.common.errors import (
    ConfigError,
    KillReason,
    ManifestRejected,
    PermissionFault,
    SimulatorError,
    SyscallError,
    VaultViolation,
    Violation,
)
from shadow_worlds.common.layout import (
    EBADF,
    EACCES,
    EFAULT,
    EFBIG,
    EINVAL,
    ENOENT,
    EPERM,
    EXIT_KILLED,
    FUTEX_WAIT,
    FUTEX_WAKE,
    INITIAL_SP,
    MAP_ANONYMOUS,
    MAP_FIXED,
    MAP_SHARED,
    MAP_TZ_VAULT,
    MARSHAL_DATA_SIZE,
    O_ACCMODE,
    O_APPEND,
    O_CREAT,
    O_RDONLY,
    O_RDWR,
    O_TRUNC,
    O_WRONLY,
    PROT_EXEC,
    PROT_READ,
    PROT_WRITE,
    SIGFRAME_VADDR,
    SYS_CLOSE,
    SYS_EXIT,
    SYS_FUTEX,
    SYS_MMAP,
    SYS_MUNMAP,
    SYS_OPEN,
    SYS_READ,
    SYS_RT_SIGRETURN,
    SYS_SIGACTION,
    SYS_TZ_EXECVE,
    SYS_WRITE,
    SYSCALL_NAMES,
    USER_TOP,
    VECTOR_DATA_ABORT,
    VECTOR_PREFETCH_ABORT,
    VECTOR_SVC,
    VECTOR_UNDEFINED,
)
from shadow_worlds.common.utils import PAGE_SIZE, page_ceil, page_floor, setup_logging
from shadow_worlds.guest.interpreter import GuestFault, GuestState, step
from shadow_worlds.guest.models import SEG_EXEC, SEG_READ, SEG_WRITE
from shadow_worlds.machine.machine import Machine
from shadow_worlds.machine.models import LABEL_SECRET, CpuMode, RegisterFile, TBytes
from shadow_worlds.paging.faults import (
    fault_anonymous,
    fault_file_private,
    fault_image,
    fault_library,
    fault_protected_file,
    fault_shared,
    record_library_base,
    release_page,
    unmap_protected_page,
)
from shadow_worlds.paging.mmu import HapMemory
from shadow_worlds.paging.models import FreshPageLedger, LibraryHashList
from shadow_worlds.runtime.config import RuntimeConfig, load_config
from shadow_worlds.runtime.models import (
    RESP_FAULT,
    RESP_NONE,
    RESP_SIGRETURN,
    RESP_SVC,
    Access,
    Action,
    EmulatedExceptionContext,
    ExceptionKind,
    ExceptionRecord,
    Hap,
    OpenVault,
    TaskPrivate,
    TaskShared,
)
from shadow_worlds.runtime.rng import TrustedRng
from shadow_worlds.syscalls.futex import futex_done, futex_wait, futex_wake
from shadow_worlds.syscalls.marshal import demarshal_response, marshal_request, read_path, stage
from shadow_worlds.syscalls.models import FutexMap, MarshalBuffer, MarshaledCall, OutBuffer
from shadow_worlds.syscalls.signals import signal_deliver, signal_register, sigreturn_restore
from shadow_worlds.syscalls.tracker import Mapping, MemoryMapTracker
from shadow_worlds.syscalls.verify import VerifiedResponse, verify_response
from shadow_worlds.vault.models import META_BLOB, VAULT_MAX_PAGES, AppKey, VaultMeta
from shadow_worlds.vault.vault import open_meta, vault_create, vault_meta_touch

setup_logging()
logger = logging.getLogger(__name__)

RNG_PATHS: Final = frozenset({"/dev/random", "/dev/urandom"})
VAULT_WINDOW: Final = VAULT_MAX_PAGES * PAGE_SIZE
MASK32: Final = 0xFFFFFFFF

_VECTORS: Final[dict[ExceptionKind, tuple[int, CpuMode]]] = {
    "SVC": (VECTOR_SVC, "SVC"),
    "Undefined": (VECTOR_UNDEFINED, "UND"),
    "PrefetchAbort": (VECTOR_PREFETCH_ABORT, "ABT"),
    "DataAbort": (VECTOR_DATA_ABORT, "ABT"),
}


@dataclass(frozen=True)
class OsOutcome:
    kind: Literal["responded", "deferred", "exited"]
    status: int = 0


class NormalWorld(Protocol):
    """What the runtime needs from the OS: service one forwarded exception."""

    def service(self, ctx: EmulatedExceptionContext) -> OsOutcome: ...


class _Parked(Exception):
    """The OS declined to answer; the HAP stays blocked."""


class _Gone(Exception):
    """The OS terminated the task while a request was outstanding."""


def _perms_from_flags(flags: int) -> frozenset[str]:
    out = set()
    if flags & SEG_READ:
        out.add("r")
    if flags & SEG_WRITE:
        out.add("w")
    if flags & SEG_EXEC:
        out.add("x")
    return frozenset(out)


def _perms_from_prot(prot: int) -> frozenset[str]:
    out = set()
    if prot & PROT_READ:
        out.add("r")
    if prot & PROT_WRITE:
        out.add("w")
    if prot & PROT_EXEC:
        out.add("x")
    return frozenset(out)


RW: Final = frozenset("rw")


class Runtime:
    def __init__(
        self, machine: Machine, booted: BootedSystem, config: RuntimeConfig, seed: int = 0
    ) -> None:
        self.machine = machine
        self.booted = booted
        self.config = config
        self.verify = config.verify
        self.seed = seed
        self.os: NormalWorld | None = None
        self.haps: dict[int, Hap] = {}
        self.guests: dict[int, GuestState] = {}
        self.rngs: dict[int, TrustedRng] = {}
        self.ledger = FreshPageLedger()
        self.futex_map = FutexMap()
        self.shared_pages: dict[tuple[str, int], int] = {}
        self.shared_refs: dict[int, int] = {}
        self.sealed_paths: set[str] = set()
        self.unsealed_paths: set[str] = set()
        self.secrets: list[bytes] = []
        self.current: int | None = None

        self._hap_ids = itertools.count(1)
        self._tags = itertools.count(1)
        self._signal_pending: set[int] = set()
        self._resume_pc: dict[int, int] = {}

        rt_zone = machine.zone("ZONE_TZ_RT")
        self._rt_cursor = rt_zone.base
        self.device_key_slot = self._rt_alloc()
        raw = booted.device_private.raw()
        machine.phys_write(
            self.device_key_slot, TBytes(raw, bytes([LABEL_SECRET]) * len(raw)), "secure"
        )
        self.secrets.append(raw)

        app_zone = machine.zone("ZONE_TZ_APP")
        reserved = int(booted.runtime_image.settings().get("reserved_app_pages", 8))
        self.reserved_base = app_zone.end - reserved * PAGE_SIZE
        self.sigframe_pool = [self.reserved_base + i * PAGE_SIZE for i in range(reserved)]

    # --- bookkeeping ---------------------------------------------------------

    def attach(self, os: NormalWorld) -> None:
        self.os = os

    def tz_mem(self) -> tuple[int, int]:
        """The (start, end) physical range the OS may hand out as secure pages."""
        return self.machine.zone("ZONE_TZ_APP").base, self.reserved_base

    def _rt_alloc(self) -> int:
        zone = self.machine.zone("ZONE_TZ_RT")
        if self._rt_cursor + PAGE_SIZE > zone.end:
            raise SimulatorError("ZONE_TZ_RT exhausted")
        page = self._rt_cursor
        self._rt_cursor += PAGE_SIZE
        return page

    def app_key(self, hap: Hap) -> AppKey:
        return AppKey(hap.app_key)

    def library_list(self, hap: Hap, name: str) -> LibraryHashList | None:
        listed = hap.manifest.library(name)
        return listed if listed is not None else self.booted.manifest_store.get(name)

    def memory(self, hap: Hap) -> HapMemory:
        return HapMemory(self.machine, hap.page_table, on_secret=self.secrets.append)

    # --- HAP lifecycle -------------------------------------------------------

    def create_hap(self, manifest_raw: bytes, pid: int, marshal_base: int, shared_addr: int) -> int:
        """Verify a manifest and build the shadow HAP for an OS zombie task."""
        if self.booted.steps_completed != 6:
            raise ManifestRejected("Boot did not complete")
        if self.verify:
            manifest = verify_manifest_bytes(manifest_raw, self.booted.device_public)
        else:
            manifest = Manifest.from_bytes(manifest_raw)
        try:
            unwrap_key = self.booted.device_private.unwrap_key
            app_key = unwrap_app_key(manifest.app_key_wrapped, unwrap_key)
        except ValueError as e:
            raise ManifestRejected(str(e)) from e
        normal = self.machine.zone("ZONE_NORMAL")
        regions = ((marshal_base, MARSHAL_DATA_SIZE + 2 * PAGE_SIZE), (shared_addr, PAGE_SIZE))
        for addr, n in regions:
            if addr % PAGE_SIZE or not normal.contains(addr, n):
                raise ManifestRejected(f"World-shared area {addr:#010x} is not in ZONE_NORMAL")

        hap_id = next(self._hap_ids)
        context = RegisterFile(pc=manifest.entry, sp=INITIAL_SP)
        tracker = MemoryMapTracker.for_layout(
            [(s.vaddr, s.length) for s in manifest.segments],
            context.sp,
            reserved=[(SIGFRAME_VADDR, PAGE_SIZE)],
        )
        key_slot = self._rt_alloc()
        self.machine.phys_write(
            key_slot, TBytes(app_key.key, bytes([LABEL_SECRET]) * len(app_key.key)), "secure"
        )
        hap = Hap(
            hap_id=hap_id,
            pid=pid,
            manifest=manifest,
            app_key=app_key.key,
            marshal=MarshalBuffer(marshal_base),
            shared_addr=shared_addr,
            private=TaskPrivate(
                saved_context=context,
                mem_map=tracker,
                key_slot=key_slot,
            ),
        )
        self.secrets.append(app_key.key)
        self.haps[hap_id] = hap
        self.guests[hap_id] = GuestState(output=hap.output)
        self.rngs[hap_id] = TrustedRng(self.seed, hap_id)
        self.machine.trace.append(
            "HAP_CREATE", hap=hap_id, pid=pid, app=manifest.app_name, pc=manifest.entry
        )
        logger.info(f"Created HAP {hap_id} for pid {pid} ({manifest.app_name})")
        return hap_id

    def runnable(self) -> list[int]:
        ready = []
        for hap_id, hap in self.haps.items():
            if hap.state == "runnable":
                ready.append(hap_id)
            elif hap.state == "blocked" and hap.pending is not None and self._answered(hap):
                ready.append(hap_id)
        return ready

    def _answered(self, hap: Hap) -> bool:
        raw = self.machine.phys_read(hap.shared_addr, TaskShared.SIZE, "secure")
        return TaskShared.unpack(raw).resp_kind != RESP_NONE

    # --- stepping ------------------------------------------------------------

    def _save_fp(self) -> None:
        regs = self.machine.regs
        if regs.fp_enabled and self.current is not None:
            self.haps[self.current].private.fp_context = list(regs.fp)
        regs.fp = [0.0] * len(regs.fp)
        regs.fp_enabled = False

    def _park_current(self) -> None:
        if self.current is None:
            return
        hap = self.haps[self.current]
        self._save_fp()
        hap.private.saved_context = self.machine.regs.copy()
        self.current = None

    def vacate(self) -> None:
        """Park whichever HAP holds the CPU and scrub the registers before leaving."""
        self._park_current()
        self.machine.regs.clear()

    def _activate(self, hap: Hap) -> None:
        if self.current == hap.hap_id:
            return
        self._park_current()
        saved = hap.private.saved_context
        if saved is None:
            raise SimulatorError(f"HAP {hap.hap_id} has no saved context")
        self.machine.regs.load(saved)
        self.current = hap.hap_id

    def step(self, hap_id: int) -> None:
        """Run one guest instruction, or complete a blocked request that has been answered."""
        hap = self.haps[hap_id]
        if self.machine.world != "secure":
            raise SimulatorError("HAPs only execute in the secure world")
        if hap.state == "blocked":
            self._complete_blocked(hap)
            return
        if hap.state != "runnable":
            raise SimulatorError(f"HAP {hap_id} is {hap.state}")
        self._activate(hap)
        result = step(self.machine.regs, self.guests[hap_id], self.memory(hap), hap_id)
        hap.steps += 1
        if result.kind == "fatal":
            assert result.reason is not None
            self.kill(hap, result.reason, f"guest fault at pc {self.machine.regs.pc:#010x}")
        elif result.kind == "exception":
            assert result.record is not None
            self.handle_exception(hap, result.record)

    # --- dispatch ------------------------------------------------------------

    def dispatch_exception(self, hap: Hap, rec: ExceptionRecord) -> Action:
        if rec.kind == "Undefined":
            return "internal"
        if rec.kind == "SVC":
            fd = rec.args[0] if rec.args else -1
            if rec.syscall_number == SYS_READ and fd in hap.private.rng_fds:
                return "internal"
            if rec.syscall_number in (SYS_READ, SYS_WRITE) and fd in hap.private.vaults:
                return "internal"
            return "forward"
        if rec.kind in ("DataAbort", "PrefetchAbort"):
            return "forward"
        return "kill"

    def handle_exception(self, hap: Hap, rec: ExceptionRecord) -> None:
        m = self.machine
        action = self.dispatch_exception(hap, rec)
        name = SYSCALL_NAMES.get(rec.syscall_number or -1, str(rec.syscall_number))
        exc_index = m.trace.append(
            "EXC",
            hap=hap.hap_id,
            kind=rec.kind,
            what=name if rec.kind == "SVC" else "-",
            vaddr=rec.faulting_vaddr or 0,
            action=action,
        )
        hap.pending_since = exc_index
        hap.pending_costs = m.metrics.snapshot()
        if action == "kill":
            self.kill(hap, "UnknownException", f"unhandled {rec.kind}")
            return
        result: int | None = None
        try:
            if rec.kind == "Undefined":
                self.handle_fp(hap)
            elif rec.kind == "SVC":
                result = self._syscall(hap, rec)
            else:
                assert rec.faulting_vaddr is not None and rec.access is not None
                self.handle_page_fault(hap, rec.faulting_vaddr, rec.access)
        except SyscallError as e:
            result = -e.errno
        except Violation as v:
            self.kill(hap, v.reason, str(v))
            return
        except _Parked:
            return
        except _Gone:
            return
        if hap.state != "runnable":
            return
        self.resume_hap(hap, result, what=name if rec.kind == "SVC" else rec.kind)

    # --- forwarding ----------------------------------------------------------

    def forward_exception(
        self,
        hap: Hap,
        kind: ExceptionKind,
        call: MarshaledCall | None = None,
        fault_vaddr: int = 0,
    ) -> OsOutcome:
        """Save and scrub the context, then raise the exception at the OS vector."""
        if self.os is None:
            raise SimulatorError("No normal world attached")
        m = self.machine
        tag = next(self._tags)
        hap.pending_tag = tag
        request = TaskShared(tag=tag, fault_vaddr=fault_vaddr)
        m.phys_write(hap.shared_addr, request.pack(), "secure")

        if self.current == hap.hap_id:
            self._park_current()
        vector, mode = _VECTORS[kind]
        m.regs.clear()
        if call is not None:
            for i, v in enumerate(call.args[:7]):
                m.regs.gp[i] = v & MASK32
            m.regs.gp[7] = call.number
        m.regs.cpsr_mode = mode
        ctx = EmulatedExceptionContext(
            vector=vector, mode=mode, attributed_task=hap.pid, kind=kind
        )
        m.trace.append(
            "FORWARD",
            hap=hap.hap_id,
            pid=hap.pid,
            vector=vector,
            what=call.name if call is not None else "fault",
            vaddr=fault_vaddr,
        )
        m.cross("normal", kind)
        outcome = self.os.service(ctx)
        m.cross("secure", "return")
        m.regs.clear()
        return outcome

    def _read_response(self, hap: Hap, expected: int) -> TaskShared:
        raw = self.machine.phys_read(hap.shared_addr, TaskShared.SIZE, "secure")
        shared = TaskShared.unpack(raw)
        if self.verify:
            if shared.tag != hap.pending_tag:
                raise Violation(
                    "ContextMismatch", f"response tag {shared.tag} != {hap.pending_tag}"
                )
            if shared.resp_kind != expected:
                no_handler = hap.private.pending_normal_context is None
                if shared.resp_kind == RESP_SIGRETURN and no_handler:
                    raise Violation("SpuriousSigreturn", "sigreturn answer with no handler running")
                raise Violation(
                    "ContextMismatch", f"response kind {shared.resp_kind} != {expected}"
                )
        elif shared.resume_pc:
            self._resume_pc[hap.hap_id] = shared.resume_pc
        if shared.sig_pending:
            self._signal_pending.add(hap.hap_id)
        return shared

    def _forward_call(self, hap: Hap, call: MarshaledCall) -> VerifiedResponse | None:
        """Forward one marshaled syscall and verify the answer; None when it blocked."""
        outcome = self.forward_exception(hap, "SVC", call)
        if outcome.kind == "exited":
            self._os_terminated(hap, outcome.status)
            raise _Gone
        if outcome.kind == "deferred":
            hap.pending = call
            hap.state = "blocked"
            logger.debug(f"HAP {hap.hap_id} blocked in {call.name}")
            return None
        expected = RESP_SIGRETURN if call.number == SYS_RT_SIGRETURN else RESP_SVC
        shared = self._read_response(hap, expected)
        return self._finish_call(hap, call, shared)

    def _finish_call(
        self, hap: Hap, call: MarshaledCall, shared: TaskShared
    ) -> VerifiedResponse:
        is_library = call.path is not None and self.library_list(hap, call.path) is not None
        verified = verify_response(hap, call, shared.syscall_result, self.verify, is_library)
        if not call.internal:
            demarshal_response(self, hap, call, verified.result)
        self._after_call(hap, call, verified, shared)
        return verified

    def _after_call(
        self, hap: Hap, call: MarshaledCall, verified: VerifiedResponse, shared: TaskShared
    ) -> None:
        """Update trusted bookkeeping once a result has been accepted."""
        result = verified.result
        priv = hap.private
        if verified.released is not None:
            for vaddr in hap.page_table.in_range(*verified.released):
                release_page(self, hap, vaddr)
        if call.number == SYS_OPEN and result >= 0 and call.path is not None:
            priv.fd_paths[result] = call.path
            if call.path in RNG_PATHS:
                priv.rng_fds.add(result)
        elif call.number == SYS_CLOSE and result == 0 and call.fd is not None:
            priv.fd_paths.pop(call.fd, None)
            priv.rng_fds.discard(call.fd)
        elif call.number == SYS_MMAP and verified.mapping is not None:
            if verified.mapping.kind == "library" and call.path is not None:
                record_library_base(self, hap, call.path, verified.mapping.start)
        elif call.number == SYS_MUNMAP and result == 0:
            start, length = call.guest_args[0], page_ceil(call.guest_args[1])
            for vaddr in hap.page_table.in_range(start, length):
                release_page(self, hap, vaddr)
            hap.tracker.remove(start, length)
        elif call.number == SYS_FUTEX:
            futex_done(self, hap)
        elif call.number == SYS_TZ_EXECVE and result > 0:
            self._spawn_from_marshal(hap, result, shared)

    def _complete_blocked(self, hap: Hap) -> None:
        call = hap.pending
        if call is None or not self._answered(hap):
            raise SimulatorError(f"HAP {hap.hap_id} is blocked without an answer")
        hap.pending = None
        hap.state = "runnable"
        try:
            shared = self._read_response(hap, RESP_SVC)
            verified = self._finish_call(hap, call, shared)
        except Violation as v:
            self.kill(hap, v.reason, str(v))
            return
        self.resume_hap(hap, verified.result, what=call.name)

    def resume_hap(self, hap: Hap, result: int | None, what: str = "") -> None:
        """Restore the saved context, publish the result and apply a pending signal."""
        if not hap.alive:
            raise SimulatorError(f"Cannot resume HAP {hap.hap_id}: {hap.state}")
        m = self.machine
        self._activate(hap)
        if result is not None:
            m.regs.gp[0] = result & MASK32
        forced = self._resume_pc.pop(hap.hap_id, None)
        if forced is not None and not self.verify:
            m.regs.pc = forced
        if hap.hap_id in self._signal_pending:
            self._signal_pending.discard(hap.hap_id)
            try:
                signal_deliver(self, hap)
            except Violation as v:
                self.kill(hap, v.reason, str(v))
                return
        costs = m.metrics.delta(hap.pending_costs) if hap.pending_costs else {}
        elapsed = len(m.trace) - hap.pending_since
        if what in SYSCALL_NAMES.values():
            m.metrics.record_latency(what, elapsed)
        m.trace.append(
            "RESUME",
            hap=hap.hap_id,
            what=what or "-",
            pc=m.regs.pc,
            result=result if result is not None else 0,
            switches=costs.get("world_switches", 0),
            zeroizations=costs.get("zeroizations", 0),
            page_copies=costs.get("page_copies", 0),
            hash_ops=costs.get("hash_ops", 0),
            unseals=costs.get("unseals", 0),
            ae_ops=costs.get("ae_ops", 0),
            copied=costs.get("bytes_copied_cross_world", 0),
            steps=elapsed,
        )
        hap.pending_costs = {}

    # --- internal handlers ---------------------------------------------------

    def handle_fp(self, hap: Hap) -> None:
        regs = self.machine.regs
        if regs.fp_enabled:
            raise Violation("UnknownException", "undefined instruction with FP enabled")
        first = hap.private.fp_context is None
        if hap.private.fp_context is None:
            hap.private.fp_context = [0.0] * len(regs.fp)
        regs.fp = list(hap.private.fp_context)
        regs.fp_enabled = True
        self.machine.trace.append("FP", hap=hap.hap_id, op="enable" if first else "restore")

    def handle_rng_read(self, hap: Hap, fd: int, length: int, buf: int | None = None) -> bytes:
        if fd not in hap.private.rng_fds:
            raise SyscallError(EBADF, f"fd {fd} is not a random device")
        data = self.rngs[hap.hap_id].read(length)
        if buf is not None and length:
            self.copy_out(hap, buf, TBytes.clean(data))
        self.machine.trace.append("RNG", hap=hap.hap_id, fd=fd, len=length)
        return data

    # --- guest memory copies -------------------------------------------------

    def _fault_in(self, hap: Hap, fault: GuestFault) -> None:
        if fault.vaddr >= USER_TOP:
            raise SyscallError(EFAULT, f"kernel address {fault.vaddr:#010x}")
        if hap.page_table.lookup(fault.vaddr) is not None:
            raise SyscallError(EFAULT, f"{fault.access} not permitted at {fault.vaddr:#010x}")
        try:
            self._classify(hap, page_floor(fault.vaddr), fault.access)
        except Violation as e:
            raise SyscallError(EFAULT, str(e)) from e
        self.handle_page_fault(hap, fault.vaddr, fault.access)

    def copy_in(self, hap: Hap, vaddr: int, length: int) -> TBytes:
        mem = self.memory(hap)
        while True:
            try:
                return mem.read(vaddr, length, "r")
            except GuestFault as f:
                self._fault_in(hap, f)

    def copy_out(self, hap: Hap, vaddr: int, data: TBytes) -> None:
        mem = self.memory(hap)
        while True:
            try:
                mem.write(vaddr, data)
                return
            except GuestFault as f:
                self._fault_in(hap, f)

    # --- page faults ---------------------------------------------------------

    def _classify(
        self, hap: Hap, page: int, access: Access
    ) -> tuple[str, frozenset[str], Mapping | None]:
        if page >= USER_TOP:
            raise Violation("KernelAccess", f"access to {page:#010x}")
        for seg in hap.manifest.segments:
            if seg.vaddr <= page < seg.vaddr + seg.length:
                perms = _perms_from_flags(seg.flags)
                kind = "image"
                break
        else:
            region = hap.tracker.region_of(page)
            mapping = None
            if region in ("stack", "heap"):
                kind, perms = "anon", RW
            elif isinstance(region, Mapping):
                mapping = region
                kind, perms = region.kind, _perms_from_prot(region.prot)
            else:
                raise Violation("Segfault", f"no mapping at {page:#010x}")
            if access not in perms:
                raise Violation("Segfault", f"{access} not permitted at {page:#010x}")
            return kind, perms, mapping
        if access not in perms:
            raise Violation("Segfault", f"{access} not permitted at {page:#010x}")
        return kind, perms, None

    def handle_page_fault(self, hap: Hap, vaddr: int, access: Access) -> None:
        page = page_floor(vaddr)
        if hap.page_table.lookup(page) is not None:
            raise Violation("Segfault", f"{access} not permitted at {page:#010x}")
        kind, perms, mapping = self._classify(hap, page, access)
        exc: ExceptionKind = "PrefetchAbort" if access == "x" else "DataAbort"
        outcome = self.forward_exception(hap, exc, fault_vaddr=page)
        if outcome.kind == "exited":
            self._os_terminated(hap, outcome.status)
            raise _Gone
        if outcome.kind == "deferred":
            raise Violation("BadResponse", f"page fault at {page:#010x} left unanswered")
        shared = self._read_response(hap, RESP_FAULT)
        s, n = shared.s_page, shared.n_page
        if kind == "image":
            expected = hap.manifest.integrity_list.lookup(page)
            fault_image(self, hap, page, s, n, perms, expected)
        elif kind == "anon":
            fault_anonymous(self, hap, page, s, perms)
        elif mapping is not None and mapping.path is not None and kind == "library":
            fault_library(self, hap, page, mapping.path, s, n, perms)
        elif mapping is not None and mapping.path is not None and kind == "shared":
            key = (mapping.path, mapping.offset + page - mapping.start)
            fault_shared(self, hap, page, key, s, perms)
        elif kind == "file":
            fault_file_private(self, hap, page, s, n, perms)
        elif kind == "protected":
            vault = self._vault_at(hap, page)
            fault_protected_file(self, hap, page, s, n, perms, vault, self.app_key(hap))
        else:
            raise Violation("Segfault", f"unbacked {kind} page {page:#010x}")

    def _vault_at(self, hap: Hap, vaddr: int) -> OpenVault:
        for v in hap.private.vaults.values():
            if v.window <= vaddr < v.window + v.window_len:
                return v
        raise Violation("Segfault", f"{vaddr:#010x} is not inside an open protected file")

    # --- syscalls ------------------------------------------------------------

    def _syscall(self, hap: Hap, rec: ExceptionRecord) -> int | None:
        number = rec.syscall_number
        assert number is not None
        args = rec.args + (0,) * (7 - len(rec.args))
        priv = hap.private

        if number == SYS_READ and args[0] in priv.rng_fds:
            self.handle_rng_read(hap, args[0], args[2], args[1])
            return args[2]
        if number == SYS_READ and args[0] in priv.vaults:
            return self._vault_read(hap, priv.vaults[args[0]], args[1], args[2])
        if number == SYS_WRITE and args[0] in priv.vaults:
            return self._vault_write(hap, priv.vaults[args[0]], args[1], args[2])
        if number == SYS_CLOSE and args[0] in priv.vaults:
            return self._vault_close(hap, args[0])
        if number == SYS_MMAP and args[4] in priv.vaults and not args[3] & MAP_ANONYMOUS:
            return self._vault_map(hap, priv.vaults[args[4]], args)
        if number == SYS_MMAP and args[3] & MAP_FIXED and self._window_of(hap, args[0], args[1]):
            raise SyscallError(EINVAL, f"{args[0]:#010x} is inside a protected-file window")
        if number == SYS_MUNMAP and (v := self._window_of(hap, args[0], args[1])) is not None:
            return self._vault_unmap(hap, v, args[0], args[1])
        if number == SYS_EXIT:
            self.exit_hap(hap, args[0])
            return None
        if number == SYS_OPEN:
            path = read_path(self, hap, args[0]).decode("utf-8", errors="replace")
            if path in hap.manifest.protected_files:
                return self._vault_open(hap, path, args[1])
        if number == SYS_SIGACTION:
            signal_register(self, hap, args[0], args[1])
        if number == SYS_RT_SIGRETURN:
            if priv.pending_normal_context is None and self.verify:
                raise Violation("SpuriousSigreturn", "rt_sigreturn outside a handler")
        if number == SYS_FUTEX:
            if args[1] == FUTEX_WAIT:
                futex_wait(self, hap, args[0], args[2])
            elif args[1] == FUTEX_WAKE:
                futex_wake(self, hap, args[0])
        if number in (SYS_READ, SYS_WRITE) and args[2] > MARSHAL_DATA_SIZE:
            return self._chunked(hap, number, args)

        call = marshal_request(self, hap, number, args)
        verified = self._forward_call(hap, call)
        if verified is None:
            raise _Parked
        if number == SYS_RT_SIGRETURN:
            if priv.pending_normal_context is not None:
                self._activate(hap)
                sigreturn_restore(self, hap)
                hap.private.saved_context = self.machine.regs.copy()
            return None
        return verified.result

    def _chunked(self, hap: Hap, number: int, args: tuple[int, ...]) -> int:
        done = 0
        total = args[2]
        while done < total:
            n = min(MARSHAL_DATA_SIZE, total - done)
            chunk_args = (args[0], args[1] + done, n, *args[3:])
            call = marshal_request(self, hap, number, chunk_args)
            verified = self._forward_call(hap, call)
            if verified is None:
                raise _Parked
            if verified.result < 0:
                return verified.result if done == 0 else done
            done += verified.result
            if verified.result < n:
                break
        return done

    def _os_terminated(self, hap: Hap, status: int) -> None:
        self._cleanup(hap)
        hap.state = "exited"
        hap.exit_code = status
        self.machine.trace.append("HAP_EXIT", hap=hap.hap_id, code=status, by="os")
        logger.info(f"HAP {hap.hap_id} terminated by the OS with status {status}")

    def _spawn_from_marshal(self, hap: Hap, pid: int, shared: TaskShared) -> None:
        data = hap.marshal.data
        length = int.from_bytes(self.machine.phys_read(data, 4, "secure"), "little")
        length = min(length, MARSHAL_DATA_SIZE - 4)
        raw = self.machine.phys_read(data + 4, length, "secure")
        try:
            self.create_hap(raw, pid, shared.aux0, shared.aux1)
        except ManifestRejected as e:
            logger.warning(f"tz_execve from HAP {hap.hap_id} refused: {e}")
            self.machine.trace.append("MANIFEST_REJECTED", hap=hap.hap_id, pid=pid)
            raise SyscallError(EPERM, str(e)) from e

    # --- protected files -----------------------------------------------------

    def _internal_call(
        self,
        hap: Hap,
        number: int,
        args: tuple[int, ...],
        path: str | None = None,
        in_data: bytes | None = None,
        out_len: int = 0,
    ) -> tuple[int, bytes]:
        """Forward a runtime-originated syscall whose buffers live in the marshal area."""
        m = self.machine
        cursor = hap.marshal.data
        gargs = list(args) + [0] * (7 - len(args))
        if path is not None:
            stage(m, cursor, TBytes.clean(path.encode("utf-8") + b"\0"))
            gargs[0] = cursor
            cursor += len(path.encode("utf-8")) + 1
        out = None
        if in_data is not None:
            stage(m, cursor, TBytes.clean(in_data))
            gargs[1] = cursor
        elif out_len:
            out = OutBuffer(guest_vaddr=0, marshal_addr=cursor, capacity=out_len)
            gargs[1] = cursor
        fd_arg = {SYS_READ: 0, SYS_WRITE: 0, SYS_CLOSE: 0, SYS_MMAP: 4}.get(number)
        call = MarshaledCall(
            number=number,
            name=SYSCALL_NAMES[number],
            guest_args=tuple(gargs),
            args=tuple(gargs),
            out=out,
            staged=len(in_data or b""),
            fd=gargs[fd_arg] if fd_arg is not None else None,
            path=path,
            internal=True,
        )
        verified = self._forward_call(hap, call)
        if verified is None:
            raise _Parked
        data = b""
        if out is not None and verified.result > 0:
            n = min(verified.result, out_len)
            data = m.phys_read(out.marshal_addr, n, "secure")
            m.metrics.bytes_copied_cross_world += n
        return verified.result, data

    def _vault_open(self, hap: Hap, path: str, flags: int) -> int:
        key = self.app_key(hap)
        fd, _ = self._internal_call(hap, SYS_OPEN, (0, O_RDWR, 0o600), path)
        if fd == -ENOENT and path in self.sealed_paths and self.verify:
            raise VaultViolation("VaultAuthFailure", f"{path}: sealed file reported missing")
        if fd == -ENOENT and flags & O_CREAT:
            fd, _ = self._internal_call(hap, SYS_OPEN, (0, O_RDWR | O_CREAT, 0o600), path)
            if fd >= 0:
                self.unsealed_paths.add(path)
        if fd < 0:
            return fd
        n, blob = self._internal_call(hap, SYS_READ, (fd, 0, META_BLOB), out_len=META_BLOB)
        if n < 0:
            self._internal_call(hap, SYS_CLOSE, (fd,))
            return n
        if n == 0 and self.verify and path not in self.unsealed_paths:
            self._internal_call(hap, SYS_CLOSE, (fd,))
            raise VaultViolation("VaultAuthFailure", f"{path}: existing file has no meta")
        if n == 0:
            file = vault_create(path, key, list(hap.manifest.protected_files))
            assert file is not None
        else:
            file = open_meta(path, blob, key, verify=self.verify)
        self.machine.metrics.ae_ops += 1
        if flags & O_TRUNC:
            file.meta = VaultMeta(epoch=file.meta.epoch)
        window, _ = self._internal_call(
            hap,
            SYS_MMAP,
            (0, VAULT_WINDOW, PROT_READ | PROT_WRITE, MAP_SHARED | MAP_TZ_VAULT, fd, 0),
            path=None,
        )
        if window < 0:
            self._internal_call(hap, SYS_CLOSE, (fd,))
            return window
        append = bool(flags & O_APPEND)
        hap.private.vaults[fd] = OpenVault(
            path=path,
            fd=fd,
            file=file,
            window=window,
            window_len=VAULT_WINDOW,
            pos=file.meta.real_length if append else 0,
            append=append,
            flags=flags,
        )
        hap.private.fd_paths[fd] = path
        self.machine.trace.append("VAULT", hap=hap.hap_id, op="open", fd=fd, base=window)
        return fd

    def _vault_read(self, hap: Hap, v: OpenVault, buf: int, n: int) -> int:
        if v.flags & O_ACCMODE == O_WRONLY:
            raise SyscallError(EBADF, f"{v.path} is write-only")
        count = max(0, min(n, v.file.meta.real_length - v.pos))
        if count:
            data = self.copy_in(hap, v.window + v.pos, count)
            self.copy_out(hap, buf, data)
        v.pos += count
        return count

    def _vault_write(self, hap: Hap, v: OpenVault, buf: int, n: int) -> int:
        if v.flags & O_ACCMODE == O_RDONLY:
            raise SyscallError(EBADF, f"{v.path} is read-only")
        if v.append:
            v.pos = v.file.meta.real_length
        if v.pos + n > VAULT_WINDOW:
            raise SyscallError(EFBIG, f"{v.path} would exceed {VAULT_MAX_PAGES} pages")
        if n == 0:
            return 0
        data = self.copy_in(hap, buf, n)
        v.file.meta.grow_to(v.pos + n)
        self.copy_out(hap, v.window + v.pos, data)
        first, last = v.pos // PAGE_SIZE, (v.pos + n - 1) // PAGE_SIZE
        v.file.dirty.update(range(first, last + 1))
        v.pos += n
        return n

    def _flush_vault(self, hap: Hap, v: OpenVault) -> None:
        key = self.app_key(hap)
        for vaddr in hap.page_table.in_range(v.window, v.window_len):
            unmap_protected_page(self, hap, vaddr, v, key)

    def _vault_close(self, hap: Hap, fd: int) -> int:
        """Seal every mapped page, close, then rewrite the meta blob last."""
        v = hap.private.vaults.pop(fd)
        key = self.app_key(hap)
        self._flush_vault(hap, v)
        self._internal_call(hap, SYS_MUNMAP, (v.window, v.window_len))
        self._internal_call(hap, SYS_CLOSE, (fd,))
        hap.private.fd_paths.pop(fd, None)
        blob = vault_meta_touch(v.file, len(self.machine.trace), key)
        self.machine.metrics.ae_ops += 1
        fd2, _ = self._internal_call(hap, SYS_OPEN, (0, O_WRONLY, 0), v.path)
        if fd2 < 0:
            return fd2
        written, _ = self._internal_call(hap, SYS_WRITE, (fd2, 0, len(blob)), in_data=blob)
        self._internal_call(hap, SYS_CLOSE, (fd2,))
        self.sealed_paths.add(v.path)
        self.unsealed_paths.discard(v.path)
        v.file.dirty.clear()
        self.machine.trace.append("VAULT", hap=hap.hap_id, op="close", fd=fd, len=written)
        return 0 if written == len(blob) else -EFAULT

    def _window_of(self, hap: Hap, start: int, length: int) -> OpenVault | None:
        """The open protected file whose window holds [start, start + length), if any."""
        end = start + page_ceil(length)
        for v in hap.private.vaults.values():
            if v.window <= start and end <= v.window + v.window_len:
                return v
            if start < v.window + v.window_len and v.window < end:
                raise SyscallError(EINVAL, f"{start:#010x} straddles the window of {v.path}")
        return None

    def _vault_map(self, hap: Hap, v: OpenVault, args: tuple[int, ...]) -> int:
        """Map part of a protected file: the guest gets a view of its decrypted window."""
        addr, length, prot, flags, _, offset = args[:6]
        if not length or offset % PAGE_SIZE or offset + page_ceil(length) > v.window_len:
            raise SyscallError(EINVAL, f"{v.path}: cannot map {offset:#x}+{length:#x}")
        start = v.window + offset
        if flags & MAP_FIXED and addr != start:
            raise SyscallError(EINVAL, f"{v.path} can only be mapped at {start:#010x}")
        if prot & PROT_WRITE and not flags & MAP_SHARED:
            raise SyscallError(EINVAL, f"{v.path}: private writable mappings are not supported")
        if prot & PROT_WRITE and v.flags & O_ACCMODE == O_RDONLY:
            raise SyscallError(EACCES, f"{v.path} is open read-only")
        self.machine.trace.append("VAULT", hap=hap.hap_id, op="mmap", fd=v.fd, base=start)
        return start

    def _vault_unmap(self, hap: Hap, v: OpenVault, start: int, length: int) -> int:
        """Seal the pages of a view back into the file; the window stays mapped."""
        if start % PAGE_SIZE or not length:
            raise SyscallError(EINVAL, f"munmap {start:#010x}+{length:#x}")
        key = self.app_key(hap)
        for vaddr in hap.page_table.in_range(start, page_ceil(length)):
            unmap_protected_page(self, hap, vaddr, v, key)
        self.machine.trace.append("VAULT", hap=hap.hap_id, op="munmap", fd=v.fd, base=start)
        return 0

    # --- termination ---------------------------------------------------------

    def _cleanup(self, hap: Hap) -> None:
        for vaddr in list(hap.page_table.entries):
            release_page(self, hap, vaddr)
        if hap.private.key_slot is not None:
            self.machine.phys_zero(hap.private.key_slot, PAGE_SIZE, "secure")
        self.futex_map.unregister(hap.hap_id)
        hap.private.vaults.clear()
        hap.pending = None
        self._signal_pending.discard(hap.hap_id)
        if self.current == hap.hap_id:
            self.machine.regs.clear()
            self.current = None

    def exit_hap(self, hap: Hap, code: int) -> None:
        for fd in sorted(hap.private.vaults):
            self._vault_close(hap, fd)
        call = MarshaledCall(SYS_EXIT, "_exit", (code,), (code,))
        self.forward_exception(hap, "SVC", call)
        self._cleanup(hap)
        hap.state = "exited"
        hap.exit_code = code
        self.machine.trace.append("HAP_EXIT", hap=hap.hap_id, code=code, by="guest")
        logger.info(f"HAP {hap.hap_id} exited with {code}")

    def kill(self, hap: Hap, reason: KillReason, message: str = "") -> None:
        """Terminate a HAP through a forwarded _exit after a detected violation."""
        if not hap.alive:
            return
        m = self.machine
        index = m.trace.append("VIOLATION", hap=hap.hap_id, reason=reason)
        hap.kill_index = index
        hap.kill_reason = reason
        logger.warning(f"Killing HAP {hap.hap_id}: {message or reason}")
        self._cleanup(hap)
        hap.state = "killed"
        hap.exit_code = EXIT_KILLED
        if m.world == "secure" and self.os is not None:
            call = MarshaledCall(SYS_EXIT, "_exit", (EXIT_KILLED,), (EXIT_KILLED,))
            self.forward_exception(hap, "SVC", call)
        m.trace.append("HAP_KILLED", hap=hap.hap_id, reason=reason, at=index)


def rt_init(
    machine: Machine,
    booted: BootedSystem,
    config: RuntimeConfig | None = None,
    seed: int = 0,
) -> Runtime:
    if not machine.config.locked:
        raise PermissionFault("Runtime cannot start before the zone configuration is locked")
    if not booted.device_private.sign_key or not booted.device_private.unwrap_key:
        raise ConfigError("Device private key is missing")
    config = config if config is not None else load_config()
    return Runtime(machine, booted, config, seed)

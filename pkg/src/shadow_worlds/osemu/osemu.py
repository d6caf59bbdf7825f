"""The untrusted normal-world OS.

It services exceptions the secure runtime forwards to it: page-fault completion,
syscalls over the marshal buffer, signal frames and futex queues. File storage is real
host storage below a sandbox directory. In adversarial mode the configured faults are
applied at their injection sites; the runtime has to cope with whatever comes back.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import random
import string
from collections import Counter
from collections.abc import Callable
from typing import TYPE_CHECKING, Final

from shadow_worlds.attest.manifest import Manifest
from shadow_worlds.common.errors import ManifestRejected, SimulatorError
from shadow_worlds.common.layout import (
    EACCES,
    EAGAIN,
    EBADF,
    EFAULT,
    EINTR,
    EINVAL,
    ENOENT,
    ENOMEM,
    ENOSYS,
    EPERM,
    ESRCH,
    FUTEX_WAIT,
    FUTEX_WAKE,
    FUTEX_WORD_OFFSET,
    INITIAL_SP,
    MAP_ANONYMOUS,
    MAP_FIXED,
    MAP_SHARED,
    MAP_TZ_VAULT,
    MARSHAL_DATA_SIZE,
    MARSHAL_PAGES,
    MAX_PATH,
    MMAP_BASE,
    O_ACCMODE,
    O_APPEND,
    O_CREAT,
    O_RDONLY,
    O_TRUNC,
    O_WRONLY,
    PRETCODE,
    SIGFRAME_VADDR,
    SIGNAL_PAGE_OFFSET,
    SYS_BRK,
    SYS_CLOSE,
    SYS_EXIT,
    SYS_FUTEX,
    SYS_GETPID,
    SYS_KILL,
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
    MiB,
)
from shadow_worlds.common.utils import PAGE_SIZE, page_ceil, page_floor, setup_logging
from shadow_worlds.guest.image import decode_image, segment_page
from shadow_worlds.guest.models import SEG_WRITE, Imm, Syscall
from shadow_worlds.guest.parser import encode_slot
from shadow_worlds.machine.machine import Machine
from shadow_worlds.machine.models import SECURE_ZONES, TBytes
from shadow_worlds.osemu.allocator import PageAllocator
from shadow_worlds.osemu.models import (
    FAULT_SITES,
    FAULT_SYSCALLS,
    FaultId,
    OpenFile,
    OsPolicy,
    Site,
    TaskPage,
    Vma,
    VmaKind,
    ZombieTask,
    signal_name,
)
from shadow_worlds.osemu.sandbox import DEVICES, Sandbox
from shadow_worlds.paging.models import HashEntry, IntegrityList
from shadow_worlds.runtime.models import (
    NO_PAGE,
    RESP_FAULT,
    RESP_SIGRETURN,
    RESP_SVC,
    EmulatedExceptionContext,
    TaskShared,
)
from shadow_worlds.runtime.runtime import OsOutcome
from shadow_worlds.syscalls.models import SignalFrame
from shadow_worlds.vault.models import BODY_BLOB, body_offset

if TYPE_CHECKING:
    from shadow_worlds.runtime.runtime import Runtime

setup_logging()
logger = logging.getLogger(__name__)

SIGSEGV: Final = 11
SIGKILL: Final = 9
HEXDIGITS: Final = frozenset(string.hexdigits.encode("ascii"))
OVERSIZE_PAD: Final = b"!" * 64

SyscallHandler = Callable[[ZombieTask, tuple[int, ...], TaskShared], int | OsOutcome]


def _flip_page(data: bytes) -> bytes:
    """Change one observable byte: an emitted character when the page holds code."""
    out = bytearray(data)
    i = out.find(b'emit x"')
    if i >= 0 and i + 7 < len(out) and out[i + 7] in HEXDIGITS:
        out[i + 7] = ord("1") if out[i + 7] == ord("0") else ord("0")
        return bytes(out)
    for j, byte in enumerate(out):
        if byte:
            out[j] ^= 0x01
            return bytes(out)
    out[0] = 0x01
    return bytes(out)


class OsEmulator:
    def __init__(
        self,
        machine: Machine,
        sandbox: Sandbox,
        policy: OsPolicy | None = None,
        seed: int = 0,
        sink: Callable[[TBytes], None] | None = None,
    ) -> None:
        self.machine = machine
        self.sandbox = sandbox
        self.policy = policy if policy is not None else OsPolicy.honest()
        self.sink = sink
        self.runtime: Runtime | None = None
        normal = machine.zone("ZONE_NORMAL")
        self.normal_alloc = PageAllocator(normal.base + MiB, normal.end, "ZONE_NORMAL")
        self.tz_alloc: PageAllocator | None = None

        self.tasks: dict[int, ZombieTask] = {}
        self.faults_applied: list[FaultId] = []
        self._pids = itertools.count(100)
        self._seen: Counter[FaultId] = Counter()
        self._rng = random.Random(seed)
        self._last_anon_s: int | None = None
        self._shared_s: dict[tuple[str, int], int] = {}
        self._shared_refs: Counter[int] = Counter()
        self._blob_history: dict[tuple[str, int], list[bytes]] = {}
        self._armed: list[tuple[int, int]] = []
        self._scraped: set[bytes] = set()

        self._syscalls: dict[int, SyscallHandler] = {
            SYS_READ: self._sys_read,
            SYS_WRITE: self._sys_write,
            SYS_OPEN: self._sys_open,
            SYS_CLOSE: self._sys_close,
            SYS_GETPID: self._sys_getpid,
            SYS_KILL: self._sys_kill,
            SYS_BRK: self._sys_brk,
            SYS_MMAP: self._sys_mmap,
            SYS_MUNMAP: self._sys_munmap,
            SYS_RT_SIGRETURN: self._sys_rt_sigreturn,
            SYS_SIGACTION: self._sys_sigaction,
            SYS_FUTEX: self._sys_futex,
            SYS_TZ_EXECVE: self._sys_tz_execve,
            SYS_EXIT: self._sys_exit,
        }

    # --- wiring --------------------------------------------------------------

    def attach_runtime(self, rt: Runtime) -> None:
        """Learn the secure page range from the runtime (the tz_mem= boot argument)."""
        start, end = rt.tz_mem()
        self.tz_alloc = PageAllocator(start, end, "ZONE_TZ_APP")
        self.runtime = rt
        rt.attach(self)

    def _tz(self) -> PageAllocator:
        if self.tz_alloc is None:
            raise SimulatorError("OS has no secure page range; attach a runtime first")
        return self.tz_alloc

    def _inject(self, fault: FaultId, site: Site, syscall: str | None = None) -> bool:
        """Count one event at `site` for `fault` and report whether the fault fires now."""
        if fault not in self.policy.faults or FAULT_SITES[fault] != site:
            return False
        trigger = self.policy.trigger_for(fault)
        wanted = trigger.syscall or FAULT_SYSCALLS.get(fault)
        if wanted is not None and syscall != wanted:
            return False
        self._seen[fault] += 1
        if not trigger.fires(self._seen[fault]):
            return False
        self.faults_applied.append(fault)
        self.machine.trace.append("OS_FAULT", fault=fault, site=site, n=self._seen[fault])
        logger.debug(f"Injecting {fault} at {site} event {self._seen[fault]}")
        return True

    # --- boot and launch -----------------------------------------------------

    def provide_runtime_image(self, raw: bytes) -> bytes:
        """The OS hands the runtime image to the boot ROM; it may hand over anything."""
        if self._inject("TamperRuntimeImage", "boot"):
            return raw[:-1] + bytes([raw[-1] ^ 0x01])
        return raw

    def _spawn(self, image_path: str, manifest_path: str) -> tuple[ZombieTask, bytes]:
        for path in (image_path, manifest_path):
            if not self.sandbox.exists(path):
                raise FileNotFoundError(path)
        image = decode_image(self.sandbox.read_all(image_path))
        manifest_raw = self.sandbox.read_all(manifest_path)
        pid = next(self._pids)
        heap_start = page_ceil(max(seg.end for seg in image.segments))
        task = ZombieTask(
            pid=pid,
            tz=True,
            image=image,
            marshal_base=self.normal_alloc.alloc(MARSHAL_PAGES),
            shared_addr=self.normal_alloc.alloc(),
            heap_start=heap_start,
            brk=heap_start,
        )
        for seg in image.segments:
            task.vmas.append(Vma(seg.vaddr, seg.length, "image", path=image_path, prot=seg.flags))
            for vaddr in range(seg.vaddr, seg.end, PAGE_SIZE):
                n = self.normal_alloc.alloc()
                self.machine.phys_write(n, segment_page(seg, vaddr), "normal")
                task.image_pages[vaddr] = n
        if self._inject("TamperManifest", "launch"):
            manifest_raw = self._tamper_manifest(task, manifest_raw)
        self.tasks[pid] = task
        self.machine.trace.append(
            "TASK_CREATE", pid=pid, image=image_path, marshal=task.marshal_base
        )
        logger.info(f"Created zombie task {pid} for {image_path}")
        return task, manifest_raw

    def _tamper_manifest(self, task: ZombieTask, raw: bytes) -> bytes:
        """Patch the first code page and its digest; the signature is left as it was."""
        code = next(s for s in task.image.segments if s.kind == "code")
        n = task.image_pages[code.vaddr]
        patched = _flip_page(self.machine.phys_read(n, PAGE_SIZE, "normal"))
        self.machine.phys_write(n, patched, "normal")
        try:
            old = Manifest.from_bytes(raw)
        except ManifestRejected:
            return raw
        digest = hashlib.sha256(patched).digest()
        entries = tuple(
            HashEntry(key=e.key, digest=digest) if e.key == code.vaddr else e
            for e in old.integrity_list.entries
        )
        forged = Manifest(
            app_name=old.app_name,
            entry=old.entry,
            segments=old.segments,
            app_key_wrapped=old.app_key_wrapped,
            integrity_list=IntegrityList(entries=entries),
            library_lists=old.library_lists,
            protected_files=old.protected_files,
            signature=old.signature,
        )
        return forged.to_bytes()

    def tz_execve(self, image_path: str, manifest_path: str) -> int:
        """Launch a HAP from the normal world: a zombie task plus its secure twin.

        Returns the pid, or -EPERM when the runtime refuses the manifest.
        """
        if self.runtime is None:
            raise SimulatorError("tz_execve needs an attached runtime")
        m = self.machine
        task, manifest_raw = self._spawn(image_path, manifest_path)
        m.cross("secure", "tz_execve")
        try:
            self.runtime.create_hap(manifest_raw, task.pid, task.marshal_base, task.shared_addr)
        except ManifestRejected as e:
            logger.warning(f"Runtime refused {image_path}: {e}")
            m.trace.append("MANIFEST_REJECTED", pid=task.pid, image=image_path)
            self._terminate(task, -EPERM)
            return -EPERM
        finally:
            m.cross("normal", "tz_execve_done")
        return task.pid

    # --- exception service ---------------------------------------------------

    def service(self, ctx: EmulatedExceptionContext) -> OsOutcome:
        m = self.machine
        task = self.tasks.get(ctx.attributed_task)
        if task is None or task.state == "exited":
            raise SimulatorError(f"Exception attributed to unknown task {ctx.attributed_task}")
        self._sweep()
        shared = TaskShared.unpack(m.phys_read(task.shared_addr, TaskShared.SIZE, "normal"))
        if ctx.kind == "SVC":
            outcome = self._svc(task, m.regs.gp[7], tuple(m.regs.gp[:7]), shared)
        elif ctx.kind in ("DataAbort", "PrefetchAbort"):
            outcome = self._fault(task, shared)
        else:
            outcome = OsOutcome("exited", 128 + SIGSEGV)
        if outcome.kind == "responded" and ctx.kind == "SVC":
            status = self._post_signals(task, shared)
            if status is not None:
                self._terminate(task, status)
                return OsOutcome("exited", status)
            m.phys_write(task.shared_addr, shared.pack(), "normal")
        elif outcome.kind == "responded":
            m.phys_write(task.shared_addr, shared.pack(), "normal")
        elif outcome.kind == "exited" and task.state != "exited":
            self._terminate(task, outcome.status)
        return outcome

    def _svc(
        self, task: ZombieTask, number: int, args: tuple[int, ...], shared: TaskShared
    ) -> OsOutcome:
        name = SYSCALL_NAMES.get(number, str(number))
        handler = self._syscalls.get(number)
        result = handler(task, args, shared) if handler is not None else -ENOSYS
        if isinstance(result, OsOutcome):
            self.machine.trace.append("OS_SVC", pid=task.pid, name=name, result=result.kind)
            return result
        if shared.resp_kind != RESP_SIGRETURN:
            shared.resp_kind = RESP_SVC
        shared.syscall_result = result
        if self._inject("ResumeAtArbitraryPc", "svc", name):
            shared.resume_pc = task.image.entry
        if self._inject("SpuriousSigreturn", "svc", name):
            shared.resp_kind = RESP_SIGRETURN
            shared.resume_pc = task.image.entry
        if self._inject("SpuriousFutexWake", "svc", name):
            for other in self._blocked():
                if other.pid != task.pid:
                    self._wake(other, 0)
        self.machine.trace.append("OS_SVC", pid=task.pid, name=name, result=result)
        return OsOutcome("responded")

    # --- syscalls ------------------------------------------------------------

    def _cstring(self, addr: int) -> str:
        out = bytearray()
        pos = addr
        while len(out) < MAX_PATH:
            chunk = self.machine.phys_read(pos, PAGE_SIZE - pos % PAGE_SIZE, "normal")
            nul = chunk.find(b"\0")
            if nul >= 0:
                out += chunk[:nul]
                break
            out += chunk
            pos += len(chunk)
        return out.decode("utf-8", errors="replace")

    def _sys_read(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        fd, buf, n = args[0], args[1], args[2]
        f = task.fds.get(fd)
        if f is None or f.flags & O_ACCMODE == O_WRONLY:
            return -EBADF
        if f.device:
            data = b"" if f.path == "/dev/null" else self._rng.randbytes(n)
        else:
            data = self.sandbox.read(f.path, f.pos, n)
            at_meta = f.pos == 0 and self.sandbox.is_protected(f.path) and len(data) > 24
            if at_meta and self._inject("TamperVaultMeta", "vault_meta"):
                data = data[:24] + bytes([data[24] ^ 0x01]) + data[25:]
            f.pos += len(data)
        if self._inject("OversizeReadReturn", "svc", "read"):
            self.machine.phys_write(buf, data + OVERSIZE_PAD, "normal")
            return len(data) + len(OVERSIZE_PAD)
        if data:
            self.machine.phys_write(buf, data, "normal")
        return len(data)

    def _sys_write(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        fd, buf, n = args[0], args[1], args[2]
        data = self.machine.phys_read(buf, n, "normal") if n else b""
        if fd in (1, 2) and fd not in task.fds:
            task.console += data
            return n
        f = task.fds.get(fd)
        if f is None or f.flags & O_ACCMODE == O_RDONLY:
            return -EBADF
        if f.device:
            return n
        if f.flags & O_APPEND:
            f.pos = self.sandbox.size(f.path)
        self.sandbox.write(f.path, f.pos, data)
        f.pos += n
        return n

    def _sys_open(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        path, flags = self._cstring(args[0]), args[1]
        if path in DEVICES:
            fd = task.next_fd()
            task.fds[fd] = OpenFile(path, flags, device=True)
            return fd
        try:
            if not self.sandbox.exists(path):
                if not flags & O_CREAT:
                    return -ENOENT
                self.sandbox.create(path)
            elif flags & O_TRUNC and flags & O_ACCMODE != O_RDONLY:
                self.sandbox.create(path, truncate=True)
        except (ValueError, PermissionError, OSError) as e:
            logger.debug(f"open({path!r}) refused: {e}")
            return -EACCES
        fd = task.next_fd()
        task.fds[fd] = OpenFile(path, flags)
        return fd

    def _sys_close(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        if task.fds.pop(args[0], None) is None and args[0] not in (0, 1, 2):
            return -EBADF
        return 0

    def _sys_getpid(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        return task.pid

    def _sys_kill(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        pid, signum = args[0], args[1]
        target = task if pid == 0 else self.tasks.get(pid)
        if target is None or target.state == "exited":
            return -ESRCH
        if not 0 < signum < 65:
            return -EINVAL
        target.pending_signals.append(signum)
        logger.debug(f"Signal {signal_name(signum)} queued for {target.pid}")
        if target is not task and target.state == "blocked" and signum in target.handlers:
            self._wake(target, -EINTR)
        return 0

    def _sys_brk(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        requested = args[0]
        if requested == 0:
            if self._inject("OverlapBrk", "svc", "brk"):
                return self._data_base(task)
            return task.brk
        if self._inject("OverlapBrk", "svc", "brk"):
            return self._data_base(task)
        if task.heap_start <= requested < MMAP_BASE:
            lo, hi = page_ceil(requested), page_ceil(task.brk)
            for vaddr in [p for p in task.pages if lo <= p < hi]:
                self._release(task, vaddr)
            task.brk = requested
        return task.brk

    def _data_base(self, task: ZombieTask) -> int:
        writable = [s for s in task.image.segments if s.flags & SEG_WRITE]
        return (writable or list(task.image.segments))[0].vaddr

    def _find_gap(self, task: ZombieTask, length: int) -> int | None:
        cursor = MMAP_BASE
        for v in sorted(task.vmas, key=lambda v: v.start):
            if v.end <= cursor:
                continue
            if v.start >= cursor + length:
                break
            cursor = page_ceil(v.end)
        return cursor if cursor + length <= SIGFRAME_VADDR else None

    def _sys_mmap(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        addr, length, prot, flags, fd, offset = args[:6]
        if length == 0 or offset % PAGE_SIZE:
            return -EINVAL
        length = page_ceil(length)
        path: str | None = None
        kind: VmaKind = "anon"
        if not flags & MAP_ANONYMOUS:
            f = task.fds.get(fd)
            if f is None:
                return -EBADF
            if f.device:
                return -EACCES
            path = f.path
            if flags & MAP_TZ_VAULT:
                kind = "vault"
            elif self.sandbox.catalog.kind_of(path) == "library":
                kind = "library"
            elif flags & MAP_SHARED:
                kind = "shared"
            else:
                kind = "file"
        if self._inject("OverlapMmap", "svc", "mmap"):
            start: int | None = self._data_base(task)
        elif flags & MAP_FIXED:
            if addr % PAGE_SIZE or addr + length > USER_TOP:
                return -EINVAL
            self._unmap(task, addr, length)
            start = addr
        else:
            start = self._find_gap(task, length)
        if start is None:
            return -ENOMEM
        task.vmas.append(Vma(start, length, kind, path=path, offset=offset, prot=prot))
        return start

    def _sys_munmap(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        addr, length = args[0], args[1]
        if addr % PAGE_SIZE or length == 0:
            return -EINVAL
        self._unmap(task, addr, page_ceil(length))
        return 0

    def _sys_rt_sigreturn(self, task: ZombieTask, args: tuple[int, ...], shared: TaskShared) -> int:
        task.in_handler = False
        shared.resp_kind = RESP_SIGRETURN
        return 0

    def _sys_sigaction(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int:
        signum, handler = args[0], args[1]
        if handler:
            task.handlers[signum] = handler
        else:
            task.handlers.pop(signum, None)
        return 0

    def _sys_futex(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> int | OsOutcome:
        vaddr, op, val = args[0], args[1], args[2]
        page = task.pages.get(page_floor(vaddr))
        if page is None:
            return -EFAULT
        key = page.s_page + vaddr % PAGE_SIZE
        if op == FUTEX_WAIT:
            if self._inject("StaleFutexValue", "svc", "futex"):
                return 0
            word = self.machine.phys_read(task.marshal_base + FUTEX_WORD_OFFSET, 4, "normal")
            if int.from_bytes(word, "little") != val:
                return -EAGAIN
            task.state = "blocked"
            task.futex_key = key
            return OsOutcome("deferred")
        if op == FUTEX_WAKE:
            woken = 0
            for other in self._blocked():
                if woken >= val:
                    break
                if other.futex_key == key and other.pid != task.pid:
                    self._wake(other, 0)
                    woken += 1
            return woken
        return -EINVAL

    def _sys_tz_execve(self, task: ZombieTask, args: tuple[int, ...], shared: TaskShared) -> int:
        image_path, manifest_path = self._cstring(args[0]), self._cstring(args[1])
        try:
            child, manifest_raw = self._spawn(image_path, manifest_path)
        except FileNotFoundError:
            return -ENOENT
        if len(manifest_raw) + 4 > MARSHAL_DATA_SIZE:
            self._terminate(child, -EPERM)
            return -EPERM
        payload = len(manifest_raw).to_bytes(4, "little") + manifest_raw
        self.machine.phys_write(task.marshal_base, payload, "normal")
        shared.aux0 = child.marshal_base
        shared.aux1 = child.shared_addr
        return child.pid

    def _sys_exit(self, task: ZombieTask, args: tuple[int, ...], _: TaskShared) -> OsOutcome:
        self._terminate(task, args[0])
        return OsOutcome("exited", args[0])

    # --- futex and signal plumbing -------------------------------------------

    def _blocked(self) -> list[ZombieTask]:
        return [t for _, t in sorted(self.tasks.items()) if t.state == "blocked"]

    def _wake(self, task: ZombieTask, result: int) -> None:
        """Answer a deferred request in place; the runtime picks it up when it schedules."""
        task.state = "zombie"
        task.futex_key = None
        raw = self.machine.phys_read(task.shared_addr, TaskShared.SIZE, "normal")
        shared = TaskShared.unpack(raw)
        shared.resp_kind = RESP_SVC
        shared.syscall_result = result
        if task.pending_signals and task.pending_signals[0] in task.handlers:
            self._post_signals(task, shared)
        self.machine.phys_write(task.shared_addr, shared.pack(), "normal")
        self.machine.trace.append("OS_WAKE", pid=task.pid, result=result)

    def _post_signals(self, task: ZombieTask, shared: TaskShared) -> int | None:
        """Build a frame for the next pending signal; an exit status when it is fatal."""
        if task.in_handler or not task.pending_signals:
            return None
        signum = task.pending_signals.pop(0)
        handler = task.handlers.get(signum)
        if handler is None:
            logger.info(f"Task {task.pid} terminated by {signal_name(signum)}")
            return 128 + signum
        pretcode = PRETCODE
        if self._inject("ForgedSignalHandler", "signal"):
            handler = task.image.entry
        if self._inject("CorruptPretcode", "signal"):
            pretcode = encode_slot(Syscall(SYS_EXIT, (Imm(99),)))
        frame = SignalFrame(signum=signum, handler=handler, return_pc=0, pretcode=pretcode)
        self.machine.phys_write(task.marshal_base + SIGNAL_PAGE_OFFSET, frame.pack(), "normal")
        shared.sig_pending = 1
        shared.sig_signum = signum
        shared.sig_handler = handler
        shared.sig_pretcode = pretcode[:8]
        task.in_handler = True
        self.machine.trace.append("OS_SIGNAL", pid=task.pid, signum=signum, handler=handler)
        return None

    # --- page faults ---------------------------------------------------------

    def _fault(self, task: ZombieTask, shared: TaskShared) -> OsOutcome:
        m = self.machine
        vaddr = page_floor(shared.fault_vaddr)
        vma = task.vma_at(vaddr)
        if vma is not None:
            kind = vma.kind
        elif INITIAL_SP <= vaddr < USER_TOP or task.heap_start <= vaddr < page_ceil(task.brk):
            kind = "anon"
        else:
            logger.info(f"Task {task.pid}: no mapping at {vaddr:#010x}")
            return OsOutcome("exited", 128 + SIGSEGV)
        if vaddr in task.pages:
            if vma is not None and vma.kind == "vault":
                self._write_back(task, vma, vaddr)
            self._release(task, vaddr)
        try:
            s = self._tz().alloc()
        except SimulatorError as e:
            logger.warning(f"Task {task.pid}: {e}")
            return OsOutcome("exited", 128 + SIGKILL)

        n = NO_PAGE
        original: bytes | None = None
        if kind == "image":
            n = task.image_pages[vaddr]
            if self._inject("TamperImagePagePre", "image_fault"):
                m.phys_write(n, _flip_page(m.phys_read(n, PAGE_SIZE, "normal")), "normal")
            if self._inject("TamperImagePagePost", "image_fault"):
                self._armed.append((n, self._rng.randint(0, 4)))
        elif kind == "anon":
            if self._inject("WrongZonePage", "anon_fault"):
                self._tz().free(s)
                s = self.normal_alloc.alloc()
            elif self._inject("NonFreshPage", "anon_fault") and self._last_anon_s is not None:
                self._tz().free(s)
                s = self._last_anon_s
            self._last_anon_s = s
        elif kind in ("file", "library"):
            assert vma is not None and vma.path is not None
            n = self.normal_alloc.alloc()
            data = self.sandbox.read(vma.path, vma.offset + vaddr - vma.start, PAGE_SIZE)
            m.phys_write(n, data.ljust(PAGE_SIZE, b"\0"), "normal")
        elif kind == "shared":
            assert vma is not None and vma.path is not None
            key = (vma.path, vma.offset + vaddr - vma.start)
            existing = self._shared_s.get(key)
            if existing is not None:
                self._tz().free(s)
                s = existing
            else:
                self._shared_s[key] = s
            self._shared_refs[s] += 1
        elif kind == "vault":
            assert vma is not None and vma.path is not None
            n = self.normal_alloc.alloc(2)
            original = self._vault_blob(vma, vaddr)
            m.phys_write(n, original, "normal")

        task.pages[vaddr] = TaskPage(
            s_page=s, n_page=None if n == NO_PAGE else n, kind=kind, original=original
        )
        shared.resp_kind = RESP_FAULT
        shared.s_page = s
        shared.n_page = n
        shared.pte_perms = vma.prot if vma is not None else 3
        m.trace.append("OS_PAGE", pid=task.pid, vaddr=vaddr, s_page=s, n_page=n, kind=kind)
        return OsOutcome("responded")

    def _vault_blob(self, vma: Vma, vaddr: int) -> bytes:
        assert vma.path is not None
        index = (vaddr - vma.start + vma.offset) // PAGE_SIZE
        blob = self.sandbox.read(vma.path, body_offset(index), BODY_BLOB).ljust(BODY_BLOB, b"\0")
        history = self._blob_history.setdefault((vma.path, index), [])
        if any(blob) and blob not in history:
            history.append(blob)
        if self._inject("ReplayVaultEpoch", "vault_fault") and history and history[0] != blob:
            blob = history[0]
        if self._inject("TamperVaultBody", "vault_fault"):
            blob = blob[:12] + bytes([blob[12] ^ 0x01]) + blob[13:]
        return blob

    # --- address-space teardown ----------------------------------------------

    def _release(self, task: ZombieTask, vaddr: int) -> None:
        page = task.pages.pop(vaddr, None)
        if page is None:
            return
        if page.kind == "shared":
            self._shared_refs[page.s_page] -= 1
            if self._shared_refs[page.s_page] <= 0:
                del self._shared_refs[page.s_page]
                self._shared_s = {k: v for k, v in self._shared_s.items() if v != page.s_page}
                self._tz().free(page.s_page)
        elif self._tz().owns(page.s_page):
            self._tz().free(page.s_page)
        if page.n_page is not None and page.kind != "image":
            self.normal_alloc.free(page.n_page)
            if page.kind == "vault":
                self.normal_alloc.free(page.n_page + PAGE_SIZE)

    def _write_back(self, task: ZombieTask, vma: Vma, vaddr: int) -> None:
        """Copy a changed protected-file buffer back to storage."""
        page = task.pages.get(vaddr)
        if page is None or page.n_page is None or vma.path is None:
            return
        current = self.machine.phys_read(page.n_page, BODY_BLOB, "normal")
        if current == page.original or not any(current):
            return
        index = (vaddr - vma.start + vma.offset) // PAGE_SIZE
        self.sandbox.write(vma.path, body_offset(index), current)
        history = self._blob_history.setdefault((vma.path, index), [])
        if current not in history:
            history.append(current)

    def _unmap(self, task: ZombieTask, start: int, length: int) -> None:
        end = start + length
        kept: list[Vma] = []
        for v in task.vmas:
            if v.end <= start or v.start >= end:
                kept.append(v)
                continue
            lo, hi = max(v.start, start), min(v.end, end)
            for vaddr in sorted(p for p in task.pages if lo <= p < hi):
                if v.kind == "vault":
                    self._write_back(task, v, vaddr)
                self._release(task, vaddr)
            if v.start < lo:
                kept.append(Vma(v.start, lo - v.start, v.kind, v.path, v.offset, v.prot))
            if hi < v.end:
                kept.append(Vma(hi, v.end - hi, v.kind, v.path, v.offset + hi - v.start, v.prot))
        task.vmas = kept

    def _terminate(self, task: ZombieTask, status: int) -> None:
        if task.state == "exited":
            return
        task.state = "exited"
        task.exit_code = status
        task.futex_key = None
        for vaddr in sorted(task.pages):
            self._release(task, vaddr)
        for n in task.image_pages.values():
            self.normal_alloc.free(n)
        task.image_pages.clear()
        task.fds.clear()
        self.machine.trace.append("TASK_EXIT", pid=task.pid, status=status)
        logger.info(f"Task {task.pid} exited with {status}")

    # --- adversary -----------------------------------------------------------

    def _sweep(self) -> None:
        """Adversarial work done on every entry into the OS."""
        if not self.policy.adversarial:
            return
        if self._inject("ScrapeSecureMemory", "any"):
            self.scrape()
        if self._inject("DmaStyleWrite", "any"):
            self.dma_write()
        still: list[tuple[int, int]] = []
        for n, delay in self._armed:
            if delay > 0:
                still.append((n, delay - 1))
                continue
            self.machine.phys_write(n, b"\xff" * PAGE_SIZE, "normal")
            self.machine.trace.append("OS_TAMPER", n_page=n)
        self._armed = still

    def scrape(self) -> TBytes:
        """Read every touched secure page and every marshal buffer as the normal world."""
        m = self.machine
        out = TBytes.clean(b"")
        pages = [p for zone in SECURE_ZONES for p in m.touched_pages(zone)]
        touched = set(m.touched_pages("ZONE_NORMAL"))
        for task in self.tasks.values():
            if task.state == "exited":
                continue
            end = task.marshal_base + MARSHAL_PAGES * PAGE_SIZE
            span = range(task.marshal_base, end, PAGE_SIZE)
            pages += [p for p in span if p in touched]
        nonzero = 0
        for page in pages:
            got = m.phys_read_t(page, PAGE_SIZE, "normal")
            if not any(got.data):
                continue
            nonzero += 1
            key = hashlib.sha256(got.data + got.labels).digest()
            if key in self._scraped:
                continue
            self._scraped.add(key)
            out = out + got
            if self.sink is not None:
                self.sink(got)
        m.trace.append("SCRAPE", pages=len(pages), nonzero=nonzero)
        return out

    def dma_write(self) -> int:
        """Bus-master writes into secure memory; the address space controller drops them."""
        m = self.machine
        pages = [p for zone in SECURE_ZONES for p in m.touched_pages(zone)][:32]
        for page in pages:
            m.phys_write(page, b"\xa5" * 64, "normal")
        m.trace.append("DMA", pages=len(pages))
        return len(pages)

    # --- inspection ----------------------------------------------------------

    def console(self, pid: int) -> bytes:
        task = self.tasks.get(pid)
        return bytes(task.console) if task is not None else b""

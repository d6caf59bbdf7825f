"""Direct-execution reference kernel.

Runs guest images on flat per-process memory with syscalls answered in place, no world
switch and no shielding. Protected files are ordinary plaintext files here. Benign
programs must emit the same bytes under this kernel as under the shielded stack with an
honest OS; that equivalence is what the oracle tests check.
"""

from __future__ import annotations

import itertools
import logging
from collections import Counter
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Final, Literal

from shadow_worlds.common.errors import KillReason, SyscallError
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
    ESRCH,
    EXIT_KILLED,
    FRAME_PRETCODE,
    FUTEX_WAIT,
    FUTEX_WAKE,
    INITIAL_SP,
    MAP_ANONYMOUS,
    MAP_FIXED,
    MAP_SHARED,
    MAX_PATH,
    MMAP_BASE,
    O_ACCMODE,
    O_APPEND,
    O_CREAT,
    O_RDONLY,
    O_TRUNC,
    O_WRONLY,
    PRETCODE,
    PROT_EXEC,
    PROT_READ,
    PROT_WRITE,
    SIGFRAME_VADDR,
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
)
from shadow_worlds.common.utils import PAGE_SIZE, page_ceil, page_floor, setup_logging
from shadow_worlds.guest.image import decode_image, segment_page
from shadow_worlds.guest.interpreter import GuestFault, GuestState, step
from shadow_worlds.guest.models import SEG_EXEC, SEG_READ, SEG_WRITE, GuestImage
from shadow_worlds.machine.models import RegisterFile, TBytes
from shadow_worlds.osemu.models import OpenFile, Vma, VmaKind
from shadow_worlds.osemu.sandbox import DEVICES, Sandbox
from shadow_worlds.runtime.models import Access
from shadow_worlds.runtime.rng import TrustedRng

setup_logging()
logger = logging.getLogger(__name__)

MASK32: Final = 0xFFFFFFFF
RNG_PATHS: Final = frozenset({"/dev/random", "/dev/urandom"})

ProcessState = Literal["runnable", "blocked", "waking", "exited", "killed"]


def _perms(read: bool, write: bool, execute: bool) -> frozenset[str]:
    return frozenset(c for c, on in (("r", read), ("w", write), ("x", execute)) if on)


@dataclass
class FlatPage:
    frame: bytearray
    perms: frozenset[str]


@dataclass
class Process:
    index: int
    pid: int
    image_path: str
    image: GuestImage
    rng: TrustedRng
    heap_start: int
    brk: int
    regs: RegisterFile
    guest: GuestState = field(default_factory=GuestState)
    pages: dict[int, FlatPage] = field(default_factory=dict)
    vmas: list[Vma] = field(default_factory=list)
    fds: dict[int, OpenFile] = field(default_factory=dict)
    handlers: dict[int, int] = field(default_factory=dict)
    pending_signals: list[int] = field(default_factory=list)
    saved: RegisterFile | None = None
    state: ProcessState = "runnable"
    futex_key: tuple[int, int] | None = None
    wake_result: int = 0
    exit_code: int | None = None
    kill_reason: KillReason | None = None
    console: bytearray = field(default_factory=bytearray)
    steps: int = 0

    @property
    def output(self) -> bytes:
        return bytes(self.guest.output)

    @property
    def alive(self) -> bool:
        return self.state not in ("exited", "killed")

    def next_fd(self) -> int:
        fd = 3
        while fd in self.fds:
            fd += 1
        return fd

    def vma_at(self, vaddr: int) -> Vma | None:
        for v in self.vmas:
            if v.contains(vaddr):
                return v
        return None


class FlatMemory:
    """GuestMemory over a process's page dict. Missing or forbidden pages raise GuestFault."""

    def __init__(self, proc: Process) -> None:
        self.proc = proc

    def _frame(self, vaddr: int, access: Access) -> bytearray:
        page = self.proc.pages.get(page_floor(vaddr))
        if page is None or access not in page.perms:
            raise GuestFault(vaddr, access)
        return page.frame

    def read(self, vaddr: int, length: int, access: Access) -> TBytes:
        out = bytearray()
        pos, end = vaddr, vaddr + length
        while pos < end:
            frame = self._frame(pos, access)
            off = pos % PAGE_SIZE
            n = min(PAGE_SIZE - off, end - pos)
            out += frame[off : off + n]
            pos += n
        return TBytes.clean(bytes(out))

    def write(self, vaddr: int, data: TBytes) -> None:
        end = vaddr + len(data)
        for page in range(page_floor(vaddr), end, PAGE_SIZE):
            self._frame(max(page, vaddr), "w")
        pos = vaddr
        while pos < end:
            frame = self._frame(pos, "w")
            off = pos % PAGE_SIZE
            n = min(PAGE_SIZE - off, end - pos)
            frame[off : off + n] = data.data[pos - vaddr : pos - vaddr + n]
            pos += n

    def mark_secret(self, vaddr: int, length: int) -> None:
        for page in range(page_floor(vaddr), vaddr + length, PAGE_SIZE):
            self._frame(max(page, vaddr), "r")


Handler = Callable[[Process, tuple[int, ...]], int | None]


class DirectKernel:
    def __init__(self, sandbox: Sandbox, seed: int = 0, max_steps: int = 200_000) -> None:
        self.sandbox = sandbox
        self.seed = seed
        self.max_steps = max_steps
        self.processes: list[Process] = []
        self.steps = 0
        self.traps: Counter[str] = Counter()
        self._pids = itertools.count(100)
        self._indexes = itertools.count(1)
        self._shared: dict[tuple[str, int], bytearray] = {}
        self._syscalls: dict[int, Handler] = {
            SYS_READ: self._sys_read,
            SYS_WRITE: self._sys_write,
            SYS_OPEN: self._sys_open,
            SYS_CLOSE: self._sys_close,
            SYS_GETPID: self._sys_getpid,
            SYS_KILL: self._sys_kill,
            SYS_BRK: self._sys_brk,
            SYS_MMAP: self._sys_mmap,
            SYS_MUNMAP: self._sys_munmap,
            SYS_SIGACTION: self._sys_sigaction,
            SYS_RT_SIGRETURN: self._sys_rt_sigreturn,
            SYS_FUTEX: self._sys_futex,
            SYS_TZ_EXECVE: self._sys_tz_execve,
            SYS_EXIT: self._sys_exit,
        }

    # --- processes -----------------------------------------------------------

    def launch(self, image_path: str) -> int:
        """Start a process from an image in the sandbox and return its pid."""
        if not self.sandbox.exists(image_path):
            raise FileNotFoundError(image_path)
        image = decode_image(self.sandbox.read_all(image_path))
        index = next(self._indexes)
        heap_start = page_ceil(max(seg.end for seg in image.segments))
        proc = Process(
            index=index,
            pid=next(self._pids),
            image_path=image_path,
            image=image,
            rng=TrustedRng(self.seed, index),
            heap_start=heap_start,
            brk=heap_start,
            regs=RegisterFile(pc=image.entry, sp=INITIAL_SP),
        )
        self.processes.append(proc)
        logger.debug(f"Reference process {proc.pid} started from {image_path}")
        return proc.pid

    def by_pid(self, pid: int) -> Process | None:
        for p in self.processes:
            if p.pid == pid:
                return p
        return None

    def run(self) -> list[Process]:
        """Round-robin one instruction per ready process until all finish or the budget ends."""
        while self.steps < self.max_steps:
            ready = [p for p in self.processes if p.state in ("runnable", "waking")]
            if not ready:
                break
            for p in ready:
                if self.steps >= self.max_steps:
                    break
                if p.state in ("runnable", "waking"):
                    self.step(p)
                    self.steps += 1
        return self.processes

    def step(self, p: Process) -> None:
        if p.state == "waking":
            p.state = "runnable"
            self._resume(p, p.wake_result)
            return
        result = step(p.regs, p.guest, FlatMemory(p), p.index)
        p.steps += 1
        if result.kind == "fatal":
            assert result.reason is not None
            self._kill(p, result.reason)
            return
        if result.kind != "exception":
            return
        rec = result.record
        assert rec is not None
        if rec.kind == "SVC" and rec.syscall_number is not None:
            self.traps[SYSCALL_NAMES.get(rec.syscall_number, str(rec.syscall_number))] += 1
        else:
            self.traps[rec.kind] += 1
        if rec.kind == "Undefined":
            if p.regs.fp_enabled:
                self._kill(p, "UnknownException")
                return
            p.regs.fp_enabled = True
        elif rec.kind == "SVC":
            assert rec.syscall_number is not None
            self._syscall(p, rec.syscall_number, rec.args + (0,) * (7 - len(rec.args)))
        else:
            assert rec.faulting_vaddr is not None and rec.access is not None
            if not self._populate(p, rec.faulting_vaddr, rec.access):
                self._kill(p, "Segfault")

    def _kill(self, p: Process, reason: KillReason) -> None:
        p.kill_reason = reason
        self._finish(p, EXIT_KILLED, "killed")
        logger.info(f"Reference process {p.pid} killed: {reason}")

    def _finish(self, p: Process, code: int, state: ProcessState = "exited") -> None:
        p.state = state
        p.exit_code = code
        p.futex_key = None
        p.pages.clear()
        p.fds.clear()

    # --- memory --------------------------------------------------------------

    def _populate(self, p: Process, vaddr: int, access: Access) -> bool:
        """Demand-fill one page; False when the address is unmapped or the access forbidden."""
        page = page_floor(vaddr)
        if page >= USER_TOP or page in p.pages:
            return False
        seg = p.image.segment_at(page)
        vma = p.vma_at(page)
        if seg is not None:
            perms = _perms(
                bool(seg.flags & SEG_READ), bool(seg.flags & SEG_WRITE), bool(seg.flags & SEG_EXEC)
            )
            frame = bytearray(segment_page(seg, page))
        elif vma is not None:
            perms = _perms(
                bool(vma.prot & PROT_READ), bool(vma.prot & PROT_WRITE), bool(vma.prot & PROT_EXEC)
            )
            frame = self._vma_frame(vma, page)
        elif INITIAL_SP <= page < USER_TOP or p.heap_start <= page < page_ceil(p.brk):
            perms = frozenset("rw")
            frame = bytearray(PAGE_SIZE)
        else:
            return False
        if access not in perms:
            return False
        p.pages[page] = FlatPage(frame, perms)
        return True

    def _vma_frame(self, vma: Vma, page: int) -> bytearray:
        if vma.path is None or vma.kind == "anon":
            return bytearray(PAGE_SIZE)
        offset = vma.offset + page - vma.start
        if vma.kind == "shared":
            key = (vma.path, offset)
            if key not in self._shared:
                self._shared[key] = bytearray(
                    self.sandbox.read(vma.path, offset, PAGE_SIZE).ljust(PAGE_SIZE, b"\0")
                )
            return self._shared[key]
        return bytearray(self.sandbox.read(vma.path, offset, PAGE_SIZE).ljust(PAGE_SIZE, b"\0"))

    def _copy_in(self, p: Process, vaddr: int, length: int) -> bytes:
        mem = FlatMemory(p)
        while True:
            try:
                return mem.read(vaddr, length, "r").data
            except GuestFault as f:
                if not self._populate(p, f.vaddr, f.access):
                    raise SyscallError(EFAULT, f"bad buffer at {f.vaddr:#010x}") from f

    def _copy_out(self, p: Process, vaddr: int, data: bytes) -> None:
        mem = FlatMemory(p)
        while True:
            try:
                mem.write(vaddr, TBytes.clean(data))
                return
            except GuestFault as f:
                if not self._populate(p, f.vaddr, f.access):
                    raise SyscallError(EFAULT, f"bad buffer at {f.vaddr:#010x}") from f

    def _cstring(self, p: Process, vaddr: int) -> str:
        out = bytearray()
        pos = vaddr
        while len(out) < MAX_PATH:
            chunk = self._copy_in(p, pos, PAGE_SIZE - pos % PAGE_SIZE)
            nul = chunk.find(b"\0")
            if nul >= 0:
                out += chunk[:nul]
                break
            out += chunk
            pos += len(chunk)
        return out.decode("utf-8", errors="replace")

    # --- syscalls ------------------------------------------------------------

    def _syscall(self, p: Process, number: int, args: tuple[int, ...]) -> None:
        handler = self._syscalls.get(number)
        try:
            result = handler(p, args) if handler is not None else -ENOSYS
        except SyscallError as e:
            result = -e.errno
        if p.state != "runnable":
            return
        self._resume(p, result)

    def _resume(self, p: Process, result: int | None) -> None:
        if result is not None:
            p.regs.gp[0] = result & MASK32
        if p.saved is not None or not p.pending_signals:
            return
        signum = p.pending_signals.pop(0)
        handler = p.handlers.get(signum)
        if handler is None:
            self._finish(p, 128 + signum)
            logger.info(f"Reference process {p.pid} terminated by signal {signum}")
            return
        p.saved = p.regs.copy()
        frame = bytearray(PAGE_SIZE)
        frame[FRAME_PRETCODE : FRAME_PRETCODE + len(PRETCODE)] = PRETCODE
        p.pages[SIGFRAME_VADDR] = FlatPage(frame, frozenset("rx"))
        p.regs.gp[0] = signum
        p.regs.pc = handler
        p.regs.lr = SIGFRAME_VADDR + FRAME_PRETCODE

    def _sys_read(self, p: Process, args: tuple[int, ...]) -> int:
        fd, buf, n = args[0], args[1], args[2]
        f = p.fds.get(fd)
        if f is None or f.flags & O_ACCMODE == O_WRONLY:
            return -EBADF
        if f.device:
            data = p.rng.read(n) if f.path in RNG_PATHS else b""
        else:
            data = self.sandbox.read(f.path, f.pos, n)
            f.pos += len(data)
        if data:
            self._copy_out(p, buf, data)
        return len(data)

    def _sys_write(self, p: Process, args: tuple[int, ...]) -> int:
        fd, buf, n = args[0], args[1], args[2]
        data = self._copy_in(p, buf, n) if n else b""
        if fd in (1, 2) and fd not in p.fds:
            p.console += data
            return n
        f = p.fds.get(fd)
        if f is None or f.flags & O_ACCMODE == O_RDONLY:
            return -EBADF
        if f.device:
            return n
        if f.flags & O_APPEND:
            f.pos = self.sandbox.size(f.path)
        self.sandbox.write(f.path, f.pos, data)
        f.pos += n
        return n

    def _sys_open(self, p: Process, args: tuple[int, ...]) -> int:
        path, flags = self._cstring(p, args[0]), args[1]
        if path in DEVICES:
            fd = p.next_fd()
            p.fds[fd] = OpenFile(path, flags, device=True)
            return fd
        try:
            if not self.sandbox.exists(path):
                if not flags & O_CREAT:
                    return -ENOENT
                self.sandbox.create(path)
            elif flags & O_TRUNC and flags & O_ACCMODE != O_RDONLY:
                self.sandbox.create(path, truncate=True)
        except (ValueError, PermissionError, OSError):
            return -EACCES
        fd = p.next_fd()
        p.fds[fd] = OpenFile(path, flags)
        return fd

    def _sys_close(self, p: Process, args: tuple[int, ...]) -> int:
        if p.fds.pop(args[0], None) is None and args[0] not in (0, 1, 2):
            return -EBADF
        return 0

    def _sys_getpid(self, p: Process, args: tuple[int, ...]) -> int:
        return p.pid

    def _sys_kill(self, p: Process, args: tuple[int, ...]) -> int:
        pid, signum = args[0], args[1]
        target = p if pid == 0 else self.by_pid(pid)
        if target is None or not target.alive:
            return -ESRCH
        if not 0 < signum < 65:
            return -EINVAL
        target.pending_signals.append(signum)
        if target is not p and target.state == "blocked" and signum in target.handlers:
            self._wake(target, -EINTR)
        return 0

    def _sys_brk(self, p: Process, args: tuple[int, ...]) -> int:
        requested = args[0]
        if requested and p.heap_start <= requested < MMAP_BASE:
            for vaddr in [v for v in p.pages if page_ceil(requested) <= v < page_ceil(p.brk)]:
                del p.pages[vaddr]
            p.brk = requested
        return p.brk

    def _find_gap(self, p: Process, length: int) -> int | None:
        cursor = MMAP_BASE
        for v in sorted(p.vmas, key=lambda v: v.start):
            if v.end <= cursor:
                continue
            if v.start >= cursor + length:
                break
            cursor = page_ceil(v.end)
        return cursor if cursor + length <= SIGFRAME_VADDR else None

    def _sys_mmap(self, p: Process, args: tuple[int, ...]) -> int:
        addr, length, prot, flags, fd, offset = args[:6]
        if length == 0 or offset % PAGE_SIZE:
            return -EINVAL
        length = page_ceil(length)
        path: str | None = None
        kind: VmaKind = "anon"
        if not flags & MAP_ANONYMOUS:
            f = p.fds.get(fd)
            if f is None:
                return -EBADF
            if f.device:
                return -EACCES
            path = f.path
            if self.sandbox.catalog.kind_of(path) == "library":
                kind = "library"
            elif flags & MAP_SHARED:
                kind = "shared"
            else:
                kind = "file"
        if flags & MAP_FIXED:
            if addr % PAGE_SIZE or addr + length > USER_TOP:
                return -EINVAL
            self._unmap(p, addr, length)
            start: int | None = addr
        else:
            start = self._find_gap(p, length)
        if start is None:
            return -ENOMEM
        p.vmas.append(Vma(start, length, kind, path=path, offset=offset, prot=prot))
        return start

    def _unmap(self, p: Process, start: int, length: int) -> None:
        end = start + length
        for vaddr in [v for v in p.pages if start <= v < end and v != SIGFRAME_VADDR]:
            self._write_back(p, vaddr)
            del p.pages[vaddr]
        kept: list[Vma] = []
        for v in p.vmas:
            if v.end <= start or v.start >= end:
                kept.append(v)
                continue
            lo, hi = max(v.start, start), min(v.end, end)
            if v.start < lo:
                kept.append(Vma(v.start, lo - v.start, v.kind, v.path, v.offset, v.prot))
            if hi < v.end:
                kept.append(Vma(hi, v.end - hi, v.kind, v.path, v.offset + hi - v.start, v.prot))
        p.vmas = kept

    def _write_back(self, p: Process, vaddr: int) -> None:
        """Shared-mapping stores into a protected file reach it, never past its end."""
        vma = p.vma_at(vaddr)
        if vma is None or vma.kind != "shared" or vma.path is None:
            return
        if not self.sandbox.is_protected(vma.path):
            return
        offset = vma.offset + vaddr - vma.start
        size = self.sandbox.size(vma.path)
        if offset < size:
            self.sandbox.write(vma.path, offset, bytes(p.pages[vaddr].frame[: size - offset]))

    def _sys_munmap(self, p: Process, args: tuple[int, ...]) -> int:
        addr, length = args[0], args[1]
        if addr % PAGE_SIZE or length == 0:
            return -EINVAL
        self._unmap(p, addr, page_ceil(length))
        return 0

    def _sys_sigaction(self, p: Process, args: tuple[int, ...]) -> int:
        signum, handler = args[0], args[1]
        if handler == 0 or handler >= USER_TOP:
            return -EINVAL
        p.handlers[signum] = handler
        return 0

    def _sys_rt_sigreturn(self, p: Process, args: tuple[int, ...]) -> None:
        if p.saved is None:
            self._kill(p, "SpuriousSigreturn")
            return None
        p.regs.load(p.saved)
        p.saved = None
        p.pages.pop(SIGFRAME_VADDR, None)
        return None

    def _futex_key(self, p: Process, vaddr: int) -> tuple[int, int]:
        page = p.pages.get(page_floor(vaddr))
        if page is None:
            raise SyscallError(EFAULT, f"futex word {vaddr:#010x} is not mapped")
        return id(page.frame), vaddr % PAGE_SIZE

    def _sys_futex(self, p: Process, args: tuple[int, ...]) -> int | None:
        vaddr, op, val = args[0], args[1], args[2]
        key = self._futex_key(p, vaddr)
        if op == FUTEX_WAIT:
            current = int.from_bytes(self._copy_in(p, vaddr, 4), "little")
            if current != val:
                return -EAGAIN
            p.state = "blocked"
            p.futex_key = key
            return None
        if op == FUTEX_WAKE:
            woken = 0
            for other in self.processes:
                if woken >= val:
                    break
                if other is not p and other.state == "blocked" and other.futex_key == key:
                    self._wake(other, 0)
                    woken += 1
            return woken
        return -EINVAL

    def _wake(self, p: Process, result: int) -> None:
        p.state = "waking"
        p.futex_key = None
        p.wake_result = result

    def _sys_tz_execve(self, p: Process, args: tuple[int, ...]) -> int:
        image_path, manifest_path = self._cstring(p, args[0]), self._cstring(p, args[1])
        if not self.sandbox.exists(manifest_path):
            return -ENOENT
        try:
            return self.launch(image_path)
        except FileNotFoundError:
            return -ENOENT

    def _sys_exit(self, p: Process, args: tuple[int, ...]) -> None:
        self._finish(p, args[0])
        return None

"""Single-step interpreter shared by shielded and reference execution.

The interpreter never touches physical memory. Every fetch, load and store goes through a
`GuestMemory` backend, so a missing translation surfaces as an abort exception that the
caller (the secure runtime or the reference kernel) must resolve before re-executing.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Literal, Protocol

from shadow_worlds.common.errors import KillReason, ProgramError
from shadow_worlds.common.layout import (
    FUTEX_WAIT,
    FUTEX_WAKE,
    INSN_SLOT,
    SYS_FUTEX,
    SYS_KILL,
    SYS_RT_SIGRETURN,
    SYS_SIGACTION,
    USER_TOP,
)
from shadow_worlds.guest.models import (
    Acc,
    Addr,
    Arith,
    Call,
    Emit,
    FImm,
    FpOp,
    FReg,
    FutexWait,
    FutexWake,
    Imm,
    Jump,
    LoadMem,
    LoadWord,
    MarkSecret,
    Mov,
    Raise,
    Reg,
    RegisterSignal,
    RegOff,
    Ret,
    SigReturnStub,
    StoreMem,
    Str,
    Syscall,
    Value,
)
from shadow_worlds.guest.parser import decode_slot
from shadow_worlds.machine.models import RegisterFile, TBytes
from shadow_worlds.runtime.models import Access, ExceptionRecord

_U32 = struct.Struct("<I")
MASK32 = 0xFFFFFFFF


class GuestFault(Exception):
    """Raised by a memory backend when a translation is missing or forbids the access."""

    def __init__(self, vaddr: int, access: Access) -> None:
        super().__init__(f"{access} fault at {vaddr:#010x}")
        self.vaddr = vaddr
        self.access = access


class GuestMemory(Protocol):
    def read(self, vaddr: int, length: int, access: Access) -> TBytes: ...

    def write(self, vaddr: int, data: TBytes) -> None: ...

    def mark_secret(self, vaddr: int, length: int) -> None: ...


@dataclass
class GuestState:
    acc: TBytes = field(default_factory=lambda: TBytes.clean(b""))
    output: bytearray = field(default_factory=bytearray)


@dataclass(frozen=True)
class StepResult:
    kind: Literal["ok", "exception", "fatal"]
    record: ExceptionRecord | None = None
    reason: KillReason | None = None


OK = StepResult("ok")


def _fatal(reason: KillReason) -> StepResult:
    return StepResult("fatal", reason=reason)


def _exc(record: ExceptionRecord) -> StepResult:
    return StepResult("exception", record=record)


def _value(regs: RegisterFile, v: Value) -> int:
    return regs.gp[v.index] if isinstance(v, Reg) else v.value & MASK32


def _addr(regs: RegisterFile, a: Addr) -> int:
    if isinstance(a, RegOff):
        return (regs.gp[a.index] + a.offset) & MASK32
    return _value(regs, a)


def _fp(regs: RegisterFile, v: FReg | FImm) -> float:
    return regs.fp[v.index] if isinstance(v, FReg) else v.value


def _fp_apply(op: str, a: float, b: float | None) -> float:
    if op == "set" or b is None:
        return a
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if b == 0.0:
        return math.nan if a == 0.0 else math.copysign(math.inf, a)
    return a / b


def _in_user(addr: int, length: int = 1) -> bool:
    return addr < USER_TOP and addr + max(length, 1) <= USER_TOP


def format_fp(value: float) -> bytes:
    return f"{value:.6f}".encode("ascii")


def syscall(
    regs: RegisterFile, hap_id: int, number: int, args: tuple[int, ...], advance: bool = True
) -> StepResult:
    for i, v in enumerate(args[:7]):
        regs.gp[i] = v & MASK32
    regs.gp[7] = number
    if advance:
        regs.pc = (regs.pc + INSN_SLOT) & MASK32
    return _exc(
        ExceptionRecord(
            kind="SVC", hap_id=hap_id, syscall_number=number, args=tuple(regs.gp[0:7])
        )
    )


def step(regs: RegisterFile, state: GuestState, mem: GuestMemory, hap_id: int) -> StepResult:
    """Execute one instruction at regs.pc."""
    pc = regs.pc
    if not _in_user(pc, INSN_SLOT):
        return _fatal("KernelAccess")
    try:
        raw = mem.read(pc, INSN_SLOT, "x").data
    except GuestFault as f:
        return _exc(ExceptionRecord("PrefetchAbort", hap_id, faulting_vaddr=f.vaddr, access="x"))
    try:
        op = decode_slot(raw)
    except ProgramError:
        return _fatal("IllegalInstruction")

    nxt = (pc + INSN_SLOT) & MASK32
    try:
        match op:
            case LoadMem(addr, length):
                a, n = _addr(regs, addr), _value(regs, length)
                if not _in_user(a, n):
                    return _fatal("KernelAccess")
                state.acc = mem.read(a, n, "r")
            case LoadWord(dst, addr):
                a = _addr(regs, addr)
                if not _in_user(a, 4):
                    return _fatal("KernelAccess")
                regs.gp[dst.index] = _U32.unpack(mem.read(a, 4, "r").data)[0]
            case StoreMem(addr, value):
                a = _addr(regs, addr)
                if isinstance(value, Str):
                    data = TBytes.clean(value.data)
                elif isinstance(value, Acc):
                    data = state.acc
                else:
                    data = TBytes.clean(_U32.pack(regs.gp[value.index]))
                if not _in_user(a, len(data)):
                    return _fatal("KernelAccess")
                mem.write(a, data)
            case Mov(dst, src):
                regs.gp[dst.index] = _value(regs, src)
            case Arith(name, dst, src):
                delta = _value(regs, src)
                cur = regs.gp[dst.index]
                regs.gp[dst.index] = (cur + delta if name == "add" else cur - delta) & MASK32
            case Jump(cond, target, reg):
                taken = cond == "always" or (
                    reg is not None and (regs.gp[reg.index] == 0) == (cond == "z")
                )
                if taken:
                    nxt = target
            case Call(target):
                regs.lr = nxt
                nxt = target
            case Ret():
                nxt = regs.lr
            case Syscall(number, args):
                return syscall(regs, hap_id, number, tuple(_value(regs, a) for a in args))
            case FpOp(name, dst, a, b):
                if not regs.fp_enabled:
                    return _exc(ExceptionRecord("Undefined", hap_id))
                bv = _fp(regs, b) if b is not None else None
                regs.fp[dst.index] = _fp_apply(name, _fp(regs, a), bv)
            case RegisterSignal(signum, handler):
                return syscall(regs, hap_id, SYS_SIGACTION, (signum, handler))
            case Raise(signum, pid):
                target = _value(regs, pid) if pid is not None else 0
                return syscall(regs, hap_id, SYS_KILL, (target, signum))
            case FutexWait(addr, expected):
                a = _addr(regs, addr)
                if not _in_user(a, 4):
                    return _fatal("KernelAccess")
                current = _U32.unpack(mem.read(a, 4, "r").data)[0]
                want = _value(regs, expected)
                if current == want:
                    return syscall(regs, hap_id, SYS_FUTEX, (a, FUTEX_WAIT, want), advance=False)
            case FutexWake(addr):
                a = _addr(regs, addr)
                if not _in_user(a, 4):
                    return _fatal("KernelAccess")
                return syscall(regs, hap_id, SYS_FUTEX, (a, FUTEX_WAKE, 0x7FFFFFFF))
            case Emit(value):
                if isinstance(value, Str):
                    state.output += value.data
                elif isinstance(value, Acc):
                    state.output += state.acc.data
                elif isinstance(value, FReg):
                    if not regs.fp_enabled:
                        return _exc(ExceptionRecord("Undefined", hap_id))
                    state.output += format_fp(regs.fp[value.index])
                else:
                    state.output += str(regs.gp[value.index]).encode("ascii")
            case MarkSecret(addr, length):
                a = _addr(regs, addr)
                if not _in_user(a, length):
                    return _fatal("KernelAccess")
                mem.mark_secret(a, length)
            case SigReturnStub():
                return syscall(regs, hap_id, SYS_RT_SIGRETURN, ())
            case Imm() | Reg():
                raise ProgramError(f"Operand decoded as instruction at {pc:#x}")
    except GuestFault as f:
        return _exc(
            ExceptionRecord("DataAbort", hap_id, faulting_vaddr=f.vaddr, access=f.access)
        )
    regs.pc = nxt
    return OK

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Final, Literal

SegmentKind = Literal["code", "data"]
FpOpName = Literal["set", "add", "sub", "mul", "div"]
FpOpStr: Final = ("set", "add", "sub", "mul", "div")
ArithName = Literal["add", "sub"]
JumpCond = Literal["always", "z", "nz"]

SEG_READ: Final = 0x1
SEG_WRITE: Final = 0x2
SEG_EXEC: Final = 0x4


# --- operands ----------------------------------------------------------------


@dataclass(frozen=True)
class Imm:
    value: int


@dataclass(frozen=True)
class Reg:
    index: int


@dataclass(frozen=True)
class RegOff:
    index: int
    offset: int


@dataclass(frozen=True)
class Str:
    data: bytes


@dataclass(frozen=True)
class Acc:
    pass


@dataclass(frozen=True)
class FReg:
    index: int


@dataclass(frozen=True)
class FImm:
    value: float


Addr = Imm | Reg | RegOff
Value = Imm | Reg


# --- instructions ------------------------------------------------------------


@dataclass(frozen=True)
class LoadMem:
    addr: Addr
    length: Value


@dataclass(frozen=True)
class LoadWord:
    dst: Reg
    addr: Addr


@dataclass(frozen=True)
class StoreMem:
    addr: Addr
    value: Str | Acc | Reg


@dataclass(frozen=True)
class Mov:
    dst: Reg
    src: Value


@dataclass(frozen=True)
class Arith:
    op: ArithName
    dst: Reg
    src: Value


@dataclass(frozen=True)
class Jump:
    cond: JumpCond
    target: int
    reg: Reg | None = None


@dataclass(frozen=True)
class Call:
    target: int


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class Syscall:
    number: int
    args: tuple[Value, ...] = ()


@dataclass(frozen=True)
class FpOp:
    op: FpOpName
    dst: FReg
    a: FReg | FImm
    b: FReg | FImm | None = None


@dataclass(frozen=True)
class RegisterSignal:
    signum: int
    handler: int


@dataclass(frozen=True)
class Raise:
    signum: int
    pid: Value | None = None


@dataclass(frozen=True)
class FutexWait:
    addr: Addr
    expected: Value


@dataclass(frozen=True)
class FutexWake:
    addr: Addr


@dataclass(frozen=True)
class Emit:
    value: Str | Acc | Reg | FReg


@dataclass(frozen=True)
class MarkSecret:
    addr: Addr
    length: int


@dataclass(frozen=True)
class SigReturnStub:
    """The sigreturn trampoline placed behind a signal frame."""


GuestOp = (
    LoadMem
    | LoadWord
    | StoreMem
    | Mov
    | Arith
    | Jump
    | Call
    | Ret
    | Syscall
    | FpOp
    | RegisterSignal
    | Raise
    | FutexWait
    | FutexWake
    | Emit
    | MarkSecret
    | SigReturnStub
)


@dataclass
class GuestProgram:
    instructions: list[GuestOp]
    code_base: int
    labels: dict[str, int] = field(default_factory=dict)
    data: list[tuple[int, bytes, SegmentKind]] = field(default_factory=list)
    libraries: list[str] = field(default_factory=list)
    entry: int | None = None


# --- image -------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    vaddr: int
    length: int
    flags: int
    kind: SegmentKind
    content: bytes

    @property
    def end(self) -> int:
        return self.vaddr + self.length

    def perms(self) -> str:
        return "".join(
            c if self.flags & bit else "-"
            for c, bit in (("r", SEG_READ), ("w", SEG_WRITE), ("x", SEG_EXEC))
        )


@dataclass(frozen=True)
class LibraryRef:
    name: str


@dataclass(frozen=True)
class GuestImage:
    entry: int
    segments: tuple[Segment, ...]
    libraries: tuple[LibraryRef, ...] = ()

    def segment_at(self, vaddr: int) -> Segment | None:
        for seg in self.segments:
            if seg.vaddr <= vaddr < seg.end:
                return seg
        return None

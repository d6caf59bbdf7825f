"""Per-syscall marshal and verify specifications.

Adding a syscall means adding one `SyscallSpec`: which arguments are paths, which name
an input buffer, which name an output buffer, and which result check applies.
"""

from dataclasses import dataclass
from typing import Final, Literal

from shadow_worlds.common.layout import (
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
)

ResultCheck = Literal["none", "count", "fd", "zero", "pid", "addr", "brk", "futex", "sigreturn"]


@dataclass(frozen=True)
class SyscallSpec:
    name: str
    number: int
    result: ResultCheck
    paths: tuple[int, ...] = ()
    in_buf: tuple[int, int] | None = None
    out_buf: tuple[int, int] | None = None
    responds: bool = True


SYSCALL_TABLE: Final[dict[int, SyscallSpec]] = {
    s.number: s
    for s in (
        SyscallSpec("_exit", SYS_EXIT, "none", responds=False),
        SyscallSpec("read", SYS_READ, "count", out_buf=(1, 2)),
        SyscallSpec("write", SYS_WRITE, "count", in_buf=(1, 2)),
        SyscallSpec("open", SYS_OPEN, "fd", paths=(0,)),
        SyscallSpec("close", SYS_CLOSE, "zero"),
        SyscallSpec("getpid", SYS_GETPID, "pid"),
        SyscallSpec("kill", SYS_KILL, "zero"),
        SyscallSpec("brk", SYS_BRK, "brk"),
        SyscallSpec("munmap", SYS_MUNMAP, "zero"),
        SyscallSpec("rt_sigreturn", SYS_RT_SIGRETURN, "sigreturn"),
        SyscallSpec("sigaction", SYS_SIGACTION, "zero"),
        SyscallSpec("mmap", SYS_MMAP, "addr"),
        SyscallSpec("futex", SYS_FUTEX, "futex"),
        SyscallSpec("tz_execve", SYS_TZ_EXECVE, "pid", paths=(0, 1)),
    )
}


def lookup(number: int) -> SyscallSpec | None:
    return SYSCALL_TABLE.get(number)

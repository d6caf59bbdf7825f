"""Fixed addresses, ABI numbers and flag values shared by both worlds."""

from typing import Final

from shadow_worlds.common.utils import PAGE_SIZE

MiB: Final = 1024 * 1024

# Virtual layout (2G/2G split)
USER_TOP: Final = 0x80000000
CODE_BASE: Final = 0x00010000
DATA_BASE: Final = 0x00020000
MMAP_BASE: Final = 0x40000000
STACK_TOP: Final = USER_TOP
INITIAL_SP: Final = 0x7FF00000
SIGFRAME_VADDR: Final = 0x7FEFF000
INSN_SLOT: Final = 128

# Exception vectors
VECTOR_UNDEFINED: Final = 0xFFFF0004
VECTOR_SVC: Final = 0xFFFF0008
VECTOR_PREFETCH_ABORT: Final = 0xFFFF000C
VECTOR_DATA_ABORT: Final = 0xFFFF0010

# Syscall numbers (ARM EABI) plus the custom launcher call
SYS_EXIT: Final = 1
SYS_READ: Final = 3
SYS_WRITE: Final = 4
SYS_OPEN: Final = 5
SYS_CLOSE: Final = 6
SYS_GETPID: Final = 20
SYS_KILL: Final = 37
SYS_BRK: Final = 45
SYS_MUNMAP: Final = 91
SYS_RT_SIGRETURN: Final = 173
SYS_SIGACTION: Final = 174
SYS_MMAP: Final = 192
SYS_FUTEX: Final = 240
SYS_TZ_EXECVE: Final = 400

SYSCALL_NUMBERS: Final[dict[str, int]] = {
    "_exit": SYS_EXIT,
    "read": SYS_READ,
    "write": SYS_WRITE,
    "open": SYS_OPEN,
    "close": SYS_CLOSE,
    "getpid": SYS_GETPID,
    "kill": SYS_KILL,
    "brk": SYS_BRK,
    "munmap": SYS_MUNMAP,
    "rt_sigreturn": SYS_RT_SIGRETURN,
    "sigaction": SYS_SIGACTION,
    "mmap": SYS_MMAP,
    "futex": SYS_FUTEX,
    "tz_execve": SYS_TZ_EXECVE,
}
SYSCALL_NAMES: Final[dict[int, str]] = {v: k for k, v in SYSCALL_NUMBERS.items()}

# errno
ENOENT: Final = 2
ESRCH: Final = 3
EINTR: Final = 4
EBADF: Final = 9
EAGAIN: Final = 11
ENOMEM: Final = 12
EACCES: Final = 13
EFAULT: Final = 14
EINVAL: Final = 22
EFBIG: Final = 27
ENAMETOOLONG: Final = 36
EPERM: Final = 1
ENOSYS: Final = 38

# open(2)
O_RDONLY: Final = 0o0
O_WRONLY: Final = 0o1
O_RDWR: Final = 0o2
O_ACCMODE: Final = 0o3
O_CREAT: Final = 0o100
O_TRUNC: Final = 0o1000
O_APPEND: Final = 0o2000

# mmap(2)
PROT_READ: Final = 0x1
PROT_WRITE: Final = 0x2
PROT_EXEC: Final = 0x4
MAP_SHARED: Final = 0x01
MAP_PRIVATE: Final = 0x02
MAP_FIXED: Final = 0x10
MAP_ANONYMOUS: Final = 0x20
MAP_TZ_VAULT: Final = 0x100000

# futex(2)
FUTEX_WAIT: Final = 0
FUTEX_WAKE: Final = 1

SIGNALS: Final[dict[str, int]] = {
    "SIGHUP": 1,
    "SIGINT": 2,
    "SIGUSR1": 10,
    "SIGUSR2": 12,
    "SIGALRM": 14,
    "SIGTERM": 15,
}

NAMED_CONSTANTS: Final[dict[str, int]] = {
    "O_RDONLY": O_RDONLY,
    "O_WRONLY": O_WRONLY,
    "O_RDWR": O_RDWR,
    "O_CREAT": O_CREAT,
    "O_TRUNC": O_TRUNC,
    "O_APPEND": O_APPEND,
    "PROT_NONE": 0,
    "PROT_READ": PROT_READ,
    "PROT_WRITE": PROT_WRITE,
    "PROT_EXEC": PROT_EXEC,
    "MAP_SHARED": MAP_SHARED,
    "MAP_PRIVATE": MAP_PRIVATE,
    "MAP_FIXED": MAP_FIXED,
    "MAP_ANONYMOUS": MAP_ANONYMOUS,
    "FUTEX_WAIT": FUTEX_WAIT,
    "FUTEX_WAKE": FUTEX_WAKE,
    **SIGNALS,
}

# sigreturn stub: mov r7, #173 ; svc #0
PRETCODE: Final = bytes.fromhex("ad70a0e3000000ef")

# Per-HAP world-shared area in ZONE_NORMAL
MARSHAL_DATA_SIZE: Final = 64 * 1024
MARSHAL_PAGES: Final = MARSHAL_DATA_SIZE // PAGE_SIZE + 2
SIGNAL_PAGE_OFFSET: Final = MARSHAL_DATA_SIZE
FUTEX_WORD_OFFSET: Final = MARSHAL_DATA_SIZE + PAGE_SIZE
MAX_PATH: Final = 4096

# Signal frame layout on the reserved marshal page and its secure copy
FRAME_SIGNUM: Final = 0
FRAME_HANDLER: Final = 4
FRAME_RETURN_PC: Final = 8
FRAME_PRETCODE: Final = 16
FRAME_SIZE: Final = FRAME_PRETCODE + INSN_SLOT

EXIT_KILLED: Final = 137

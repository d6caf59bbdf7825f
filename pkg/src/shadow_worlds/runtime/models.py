from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, ClassVar, Final, Literal

from shadow_worlds.common.errors import KillReason
from shadow_worlds.common.layout import PRETCODE
from shadow_worlds.machine.models import CpuMode, RegisterFile
from shadow_worlds.paging.models import TrustedPageTable
from shadow_worlds.syscalls.models import MarshalBuffer, MarshaledCall
from shadow_worlds.syscalls.tracker import MemoryMapTracker

if TYPE_CHECKING:
    from shadow_worlds.attest.manifest import Manifest
    from shadow_worlds.vault.models import VaultFile

ExceptionKind = Literal["SVC", "DataAbort", "PrefetchAbort", "Undefined"]
Access = Literal["r", "w", "x"]
Action = Literal["internal", "forward", "kill"]
HapState = Literal["runnable", "blocked", "exited", "killed"]

NO_PAGE: Final = 0xFFFFFFFF

RESP_NONE: Final = 0
RESP_SVC: Final = 1
RESP_FAULT: Final = 2
RESP_SIGRETURN: Final = 3


@dataclass(frozen=True)
class ExceptionRecord:
    kind: ExceptionKind
    hap_id: int
    faulting_vaddr: int | None = None
    access: Access | None = None
    syscall_number: int | None = None
    args: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        is_abort = self.kind in ("DataAbort", "PrefetchAbort")
        if is_abort != (self.faulting_vaddr is not None):
            raise ValueError(f"{self.kind} record with faulting_vaddr={self.faulting_vaddr}")
        if (self.kind == "SVC") != (self.syscall_number is not None):
            raise ValueError(f"{self.kind} record with syscall_number={self.syscall_number}")


@dataclass(frozen=True)
class EmulatedExceptionContext:
    """What the OS sees when the runtime re-raises an exception in the normal world."""

    vector: int
    mode: CpuMode
    attributed_task: int
    kind: ExceptionKind
    prior_mode: CpuMode = "USR"


_TASK_SHARED = struct.Struct("<IIIIIIiIIIII8sII")


@dataclass
class TaskShared:
    """World-shared per-HAP record. Every field is untrusted when read back."""

    tag: int = 0
    resp_kind: int = RESP_NONE
    fault_vaddr: int = 0
    s_page: int = NO_PAGE
    pte_perms: int = 0
    n_page: int = NO_PAGE
    syscall_result: int = 0
    resume_pc: int = 0
    sig_pending: int = 0
    sig_signum: int = 0
    sig_handler: int = 0
    sig_return_pc: int = 0
    sig_pretcode: bytes = PRETCODE
    aux0: int = 0
    aux1: int = 0

    SIZE: ClassVar[int] = _TASK_SHARED.size

    def pack(self) -> bytes:
        return _TASK_SHARED.pack(
            self.tag & 0xFFFFFFFF,
            self.resp_kind & 0xFFFFFFFF,
            self.fault_vaddr & 0xFFFFFFFF,
            self.s_page & 0xFFFFFFFF,
            self.pte_perms & 0xFFFFFFFF,
            self.n_page & 0xFFFFFFFF,
            max(min(self.syscall_result, 0x7FFFFFFF), -0x80000000),
            self.resume_pc & 0xFFFFFFFF,
            self.sig_pending & 0xFFFFFFFF,
            self.sig_signum & 0xFFFFFFFF,
            self.sig_handler & 0xFFFFFFFF,
            self.sig_return_pc & 0xFFFFFFFF,
            self.sig_pretcode[:8].ljust(8, b"\0"),
            self.aux0 & 0xFFFFFFFF,
            self.aux1 & 0xFFFFFFFF,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> TaskShared:
        return cls(*_TASK_SHARED.unpack_from(raw, 0))


@dataclass
class OpenVault:
    """Runtime-side state of an open protected file."""

    path: str
    fd: int
    file: VaultFile
    window: int
    window_len: int
    pos: int = 0
    append: bool = False
    flags: int = 0


@dataclass
class TaskPrivate:
    saved_context: RegisterFile | None = None
    fp_context: list[float] | None = None
    registered_signal_handlers: dict[int, int] = field(default_factory=dict)
    pending_normal_context: RegisterFile | None = None
    rng_fds: set[int] = field(default_factory=set)
    mem_map: MemoryMapTracker | None = None
    futex_wait_vaddr: int | None = None
    fd_paths: dict[int, str] = field(default_factory=dict)
    vaults: dict[int, OpenVault] = field(default_factory=dict)
    library_bases: dict[str, int] = field(default_factory=dict)
    sigframe_page: int | None = None
    key_slot: int | None = None


@dataclass
class Hap:
    hap_id: int
    pid: int
    manifest: Manifest
    app_key: bytes
    marshal: MarshalBuffer
    shared_addr: int
    page_table: TrustedPageTable = field(default_factory=TrustedPageTable)
    private: TaskPrivate = field(default_factory=TaskPrivate)
    state: HapState = "runnable"
    output: bytearray = field(default_factory=bytearray)
    exit_code: int | None = None
    kill_reason: KillReason | None = None
    kill_index: int | None = None
    pending: MarshaledCall | None = None
    pending_tag: int = 0
    pending_since: int = 0
    pending_costs: dict[str, int] = field(default_factory=dict)
    steps: int = 0

    @property
    def alive(self) -> bool:
        return self.state in ("runnable", "blocked")

    @property
    def tracker(self) -> MemoryMapTracker:
        assert self.private.mem_map is not None
        return self.private.mem_map

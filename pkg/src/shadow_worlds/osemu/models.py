from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Final, Literal, get_args

from pydantic import ConfigDict, Field, model_validator
from pydantic.dataclasses import dataclass as pyd_dataclass

from shadow_worlds.common.layout import SIGNALS
from shadow_worlds.guest.models import GuestImage

FaultId = Literal[
    "WrongZonePage",
    "NonFreshPage",
    "TamperImagePagePre",
    "TamperImagePagePost",
    "OverlapMmap",
    "OverlapBrk",
    "OversizeReadReturn",
    "ForgedSignalHandler",
    "CorruptPretcode",
    "SpuriousSigreturn",
    "StaleFutexValue",
    "SpuriousFutexWake",
    "TamperVaultBody",
    "TamperVaultMeta",
    "ReplayVaultEpoch",
    "TamperManifest",
    "TamperRuntimeImage",
    "ResumeAtArbitraryPc",
    "ScrapeSecureMemory",
    "DmaStyleWrite",
]
FAULT_IDS: Final[tuple[FaultId, ...]] = get_args(FaultId)

Site = Literal[
    "boot",
    "launch",
    "svc",
    "fault",
    "anon_fault",
    "image_fault",
    "vault_fault",
    "vault_meta",
    "signal",
    "any",
]

# Where each fault is injected. Triggers count events of this kind.
FAULT_SITES: Final[dict[FaultId, Site]] = {
    "WrongZonePage": "anon_fault",
    "NonFreshPage": "anon_fault",
    "TamperImagePagePre": "image_fault",
    "TamperImagePagePost": "image_fault",
    "OverlapMmap": "svc",
    "OverlapBrk": "svc",
    "OversizeReadReturn": "svc",
    "ForgedSignalHandler": "signal",
    "CorruptPretcode": "signal",
    "SpuriousSigreturn": "svc",
    "StaleFutexValue": "svc",
    "SpuriousFutexWake": "svc",
    "TamperVaultBody": "vault_fault",
    "TamperVaultMeta": "vault_meta",
    "ReplayVaultEpoch": "vault_fault",
    "TamperManifest": "launch",
    "TamperRuntimeImage": "boot",
    "ResumeAtArbitraryPc": "svc",
    "ScrapeSecureMemory": "any",
    "DmaStyleWrite": "any",
}

# Syscall a svc-site fault is bound to, when it only makes sense on one call.
FAULT_SYSCALLS: Final[dict[FaultId, str]] = {
    "OverlapMmap": "mmap",
    "OverlapBrk": "brk",
    "OversizeReadReturn": "read",
    "StaleFutexValue": "futex",
}

OsMode = Literal["honest", "adversarial"]
VmaKind = Literal["image", "anon", "file", "shared", "vault", "library"]
TaskState = Literal["zombie", "blocked", "exited"]


@pyd_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class Trigger:
    """Fire on the nth matching event at a fault's site, optionally on every later one."""

    nth: int = Field(default=1, ge=1)
    repeat: bool = False
    syscall: str | None = None

    def fires(self, count: int) -> bool:
        return count == self.nth or (self.repeat and count > self.nth)

    def to_dict(self) -> dict[str, Any]:
        return {"nth": self.nth, "repeat": self.repeat, "syscall": self.syscall}


DEFAULT_TRIGGERS: Final[dict[FaultId, Trigger]] = {
    "NonFreshPage": Trigger(nth=2),
    "SpuriousSigreturn": Trigger(nth=2),
    "ResumeAtArbitraryPc": Trigger(nth=2),
    "ScrapeSecureMemory": Trigger(repeat=True),
    "DmaStyleWrite": Trigger(repeat=True),
    "SpuriousFutexWake": Trigger(repeat=True),
}


@pyd_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class OsPolicy:
    mode: OsMode = "honest"
    faults: tuple[FaultId, ...] = ()
    trigger: Trigger | None = None
    triggers: dict[str, Trigger] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _honest_has_no_faults(self) -> OsPolicy:
        if self.mode == "honest" and self.faults:
            raise ValueError("An honest OS cannot carry injected faults")
        for name in self.triggers:
            if name not in FAULT_IDS:
                raise ValueError(f"Trigger for unknown fault {name!r}")
        return self

    @property
    def adversarial(self) -> bool:
        return self.mode == "adversarial"

    def trigger_for(self, fault: FaultId) -> Trigger:
        if fault in self.triggers:
            return self.triggers[fault]
        if self.trigger is not None:
            return self.trigger
        return DEFAULT_TRIGGERS.get(fault, Trigger())

    @classmethod
    def honest(cls) -> OsPolicy:
        return cls()

    @classmethod
    def attack(cls, fault: FaultId, trigger: Trigger | None = None) -> OsPolicy:
        return cls(mode="adversarial", faults=(fault,), trigger=trigger)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> OsPolicy:
        d2 = dict(d)
        if d2.get("trigger") is not None:
            d2["trigger"] = Trigger(**d2["trigger"])
        d2["triggers"] = {k: Trigger(**v) for k, v in dict(d2.get("triggers", {})).items()}
        d2["faults"] = tuple(d2.get("faults", ()))
        return cls(**d2)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "faults": list(self.faults),
            "trigger": self.trigger.to_dict() if self.trigger is not None else None,
            "triggers": {k: v.to_dict() for k, v in self.triggers.items()},
        }


@dataclass
class Vma:
    start: int
    length: int
    kind: VmaKind
    path: str | None = None
    offset: int = 0
    prot: int = 0

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, vaddr: int) -> bool:
        return self.start <= vaddr < self.end


@dataclass
class OpenFile:
    path: str
    flags: int
    pos: int = 0
    device: bool = False


@dataclass
class TaskPage:
    s_page: int
    n_page: int | None = None
    kind: VmaKind = "anon"
    original: bytes | None = None


@dataclass
class ZombieTask:
    """OS-side half of a HAP. A tz task is bookkeeping only and never runs guest code."""

    pid: int
    tz: bool
    image: GuestImage
    marshal_base: int
    shared_addr: int
    heap_start: int
    brk: int
    image_pages: dict[int, int] = field(default_factory=dict)
    fds: dict[int, OpenFile] = field(default_factory=dict)
    vmas: list[Vma] = field(default_factory=list)
    pages: dict[int, TaskPage] = field(default_factory=dict)
    handlers: dict[int, int] = field(default_factory=dict)
    pending_signals: list[int] = field(default_factory=list)
    in_handler: bool = False
    futex_key: int | None = None
    state: TaskState = "zombie"
    exit_code: int | None = None
    console: bytearray = field(default_factory=bytearray)

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


def signal_name(signum: int) -> str:
    for name, num in SIGNALS.items():
        if num == signum:
            return name
    return str(signum)

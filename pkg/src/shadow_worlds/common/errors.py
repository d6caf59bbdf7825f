from __future__ import annotations

from typing import Literal

KillReason = Literal[
    "BadResponse",
    "BoundsViolation",
    "ContextMismatch",
    "IllegalInstruction",
    "IntegrityMismatch",
    "KernelAccess",
    "LibraryBase",
    "ManifestRejected",
    "MissingHash",
    "NestedSignal",
    "NonFreshPage",
    "OverlapMapping",
    "BadPretcode",
    "Segfault",
    "SpuriousSigreturn",
    "UnknownException",
    "UnregisteredHandler",
    "VaultAuthFailure",
    "VaultHashMismatch",
    "ZoneViolation",
]


class ShadowWorldsError(Exception):
    pass


class ConfigError(ShadowWorldsError):
    pass


class BusFault(ShadowWorldsError):
    def __init__(self, addr: int, length: int) -> None:
        super().__init__(f"Bus fault at {addr:#010x} (+{length})")
        self.addr = addr
        self.length = length


class PermissionFault(ShadowWorldsError):
    pass


class SimulatorError(ShadowWorldsError):
    """An internal contract of the simulator was broken."""


class ImageError(ShadowWorldsError):
    pass


class ProgramError(ShadowWorldsError):
    pass


class ManifestRejected(ShadowWorldsError):
    pass


class BootHalt(ShadowWorldsError):
    def __init__(self, step: int, message: str) -> None:
        super().__init__(f"Boot halted at step {step}: {message}")
        self.step = step


class Violation(ShadowWorldsError):
    """The runtime rejected something the normal world handed it."""

    def __init__(self, reason: KillReason, message: str = "") -> None:
        super().__init__(f"{reason}: {message}" if message else reason)
        self.reason: KillReason = reason


class VaultViolation(Violation):
    pass


class SyscallError(ShadowWorldsError):
    """A syscall the runtime answers itself with -errno, without asking the OS."""

    def __init__(self, errno: int, message: str = "") -> None:
        super().__init__(f"errno {errno}: {message}" if message else f"errno {errno}")
        self.errno = errno

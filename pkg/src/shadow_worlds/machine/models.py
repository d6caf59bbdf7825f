from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Final, Literal, cast

from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass as pyd_dataclass

from shadow_worlds.common.errors import ConfigError
from shadow_worlds.common.layout import MiB

ZoneName = Literal["ZONE_NORMAL", "ZONE_TZ_RT", "ZONE_TZ_APP"]
ZoneNameStr: Final = ("ZONE_NORMAL", "ZONE_TZ_RT", "ZONE_TZ_APP")
Security = Literal["secure", "nonsecure"]
World = Literal["secure", "normal", "monitor"]
CpuMode = Literal["USR", "SVC", "ABT", "UND", "IRQ", "MON"]

SECURE_ZONES: Final = ("ZONE_TZ_RT", "ZONE_TZ_APP")

LABEL_NONE: Final = 0
LABEL_SECRET: Final = 1
LABEL_DISCLOSED: Final = 2

GP_REGS: Final = 13
FP_REGS: Final = 32


@pyd_dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class Zone:
    name: ZoneName
    base: int = Field(ge=0, le=0xFFFFFFFF)
    length: int = Field(gt=0)

    @property
    def security(self) -> Security:
        return "secure" if self.name in SECURE_ZONES else "nonsecure"

    @property
    def end(self) -> int:
        return self.base + self.length

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + length <= self.end

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> Zone:
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "base": self.base, "length": self.length}


@pyd_dataclass(config=ConfigDict(extra="forbid"))
class ZoneConfig:
    zones: list[Zone] = Field(default_factory=list)
    locked: bool = False

    def zone(self, name: ZoneName) -> Zone:
        for z in self.zones:
            if z.name == name:
                return z
        raise KeyError(name)

    def zone_of(self, addr: int) -> Zone | None:
        for z in self.zones:
            if z.contains(addr):
                return z
        return None

    def validate(self, page_size: int) -> None:
        names = [z.name for z in self.zones]
        if sorted(names) != sorted(ZoneNameStr):
            raise ConfigError(f"Expected exactly one of each zone {ZoneNameStr}, got {names}")
        for z in self.zones:
            if z.length % page_size or z.base % page_size:
                raise ConfigError(f"{z.name} is not page aligned ({z.base:#x}+{z.length:#x})")
            if z.end > 1 << 32:
                raise ConfigError(f"{z.name} exceeds the 32-bit physical space")
        ordered = sorted(self.zones, key=lambda z: z.base)
        for a, b in zip(ordered, ordered[1:], strict=False):
            if a.end > b.base:
                raise ConfigError(f"Zones {a.name} and {b.name} overlap")

    def to_dict(self) -> dict[str, Any]:
        return {"zones": [z.to_dict() for z in self.zones], "locked": self.locked}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ZoneConfig:
        return cls(zones=[Zone.from_dict(z) for z in d.get("zones", [])])


def default_zone_config() -> ZoneConfig:
    return ZoneConfig(
        zones=[
            Zone(name="ZONE_NORMAL", base=0x00000000, length=768 * MiB),
            Zone(name="ZONE_TZ_RT", base=0x30000000, length=16 * MiB),
            Zone(name="ZONE_TZ_APP", base=0x31000000, length=240 * MiB),
        ]
    )


def _parse_size(tok: str) -> int:
    tok = tok.strip()
    for suffix, mult in (("G", 1024 * MiB), ("M", MiB), ("K", 1024)):
        if tok.upper().endswith(suffix):
            return int(tok[:-1], 0) * mult
    return int(tok, 0)


def parse_zone_text(text: str) -> ZoneConfig:
    """Parse `NAME = base, length` lines; `#` starts a comment."""
    zones: list[Zone] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            name, rhs = (s.strip() for s in line.split("=", 1))
            base_s, length_s = rhs.split(",", 1)
            if name not in ZoneNameStr:
                raise ValueError(f"unknown zone {name!r}")
            base, length = _parse_size(base_s), _parse_size(length_s)
            zones.append(Zone(name=cast(ZoneName, name), base=base, length=length))
        except ValueError as e:
            raise ConfigError(f"Zone config line {lineno}: {e}") from e
    return ZoneConfig(zones=zones)


@dataclass(frozen=True)
class TBytes:
    """Bytes paired with their per-byte taint labels."""

    data: bytes
    labels: bytes

    def __post_init__(self) -> None:
        if len(self.data) != len(self.labels):
            raise ValueError("data and labels differ in length")

    def __len__(self) -> int:
        return len(self.data)

    @classmethod
    def clean(cls, data: bytes) -> TBytes:
        return cls(data=bytes(data), labels=bytes(len(data)))

    def __add__(self, other: TBytes) -> TBytes:
        return TBytes(self.data + other.data, self.labels + other.labels)

    def __getitem__(self, s: slice) -> TBytes:
        return TBytes(self.data[s], self.labels[s])

    def relabel(self, src: int, dst: int) -> TBytes:
        return TBytes(self.data, self.labels.replace(bytes([src]), bytes([dst])))


@dataclass
class RegisterFile:
    gp: list[int] = field(default_factory=lambda: [0] * GP_REGS)
    sp: int = 0
    lr: int = 0
    pc: int = 0
    cpsr_mode: CpuMode = "USR"
    fp: list[float] = field(default_factory=lambda: [0.0] * FP_REGS)
    fp_enabled: bool = False

    def copy(self) -> RegisterFile:
        return RegisterFile(
            gp=list(self.gp),
            sp=self.sp,
            lr=self.lr,
            pc=self.pc,
            cpsr_mode=self.cpsr_mode,
            fp=list(self.fp),
            fp_enabled=self.fp_enabled,
        )

    def load(self, other: RegisterFile) -> None:
        self.gp = list(other.gp)
        self.sp, self.lr, self.pc = other.sp, other.lr, other.pc
        self.cpsr_mode = other.cpsr_mode
        self.fp = list(other.fp)
        self.fp_enabled = other.fp_enabled

    def clear(self) -> None:
        self.load(RegisterFile())

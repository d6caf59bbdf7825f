from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, model_validator

from shadow_worlds.common.utils import DATA_PATH
from shadow_worlds.harness.models import Expectation
from shadow_worlds.machine.models import ZoneConfig, default_zone_config, parse_zone_text
from shadow_worlds.osemu.models import OsPolicy

SCENARIO_DIR = DATA_PATH / "scenarios"
PROGRAM_DIR = DATA_PATH / "programs"


class ProgramSpec(BaseModel):
    name: str
    source: str | None = None
    text: str | None = None
    protected: list[str] = Field(default_factory=list)
    libraries: list[str] = Field(default_factory=list)
    launch: bool = True

    @model_validator(mode="after")
    def _has_source(self) -> ProgramSpec:
        if (self.source is None) == (self.text is None):
            raise ValueError(f"Program {self.name!r} needs exactly one of source or text")
        return self

    @property
    def image_path(self) -> str:
        return f"/bin/{self.name}.hapi"

    @property
    def manifest_path(self) -> str:
        return f"/bin/{self.name}.manifest"


class FileFixture(BaseModel):
    path: str
    text: str | None = None
    hex: str | None = None
    kind: Literal["plain", "protected", "library"] = "plain"
    owner: str | None = None

    def content(self) -> bytes:
        if self.hex is not None:
            return bytes.fromhex(self.hex)
        return (self.text or "").encode("utf-8")


class Scenario(BaseModel):
    name: str
    description: str = ""
    seed: int = 0
    zones: str | list[dict[str, Any]] | None = None
    programs: list[ProgramSpec]
    files: list[FileFixture] = Field(default_factory=list)
    policy: OsPolicy = Field(default_factory=OsPolicy.honest)
    expect: Expectation | None = None
    max_steps: int | None = None

    @model_validator(mode="after")
    def _check_names(self) -> Scenario:
        names = [p.name for p in self.programs]
        if not names:
            raise ValueError("A scenario needs at least one program")
        if len(set(names)) != len(names):
            raise ValueError(f"Duplicate program names in {names}")
        for f in self.files:
            if f.kind == "protected":
                self.owner_of(f)
        return self

    def owner_of(self, fixture: FileFixture) -> ProgramSpec:
        """The program whose key seals a protected fixture."""
        for p in self.programs:
            if fixture.owner is None and fixture.path in p.protected:
                return p
            if fixture.owner == p.name:
                return p
        raise ValueError(f"No program owns protected file {fixture.path}")

    def program(self, name: str) -> ProgramSpec:
        for p in self.programs:
            if p.name == name:
                return p
        raise KeyError(name)

    def zone_config(self) -> ZoneConfig:
        if self.zones is None:
            return default_zone_config()
        if isinstance(self.zones, str):
            return parse_zone_text(self.zones)
        return ZoneConfig.from_dict({"zones": self.zones})

    def with_policy(self, policy: OsPolicy) -> Scenario:
        return self.model_copy(update={"policy": policy})

    def source_of(self, program: ProgramSpec) -> str:
        if program.text is None:
            raise ValueError(f"Program {program.name!r} was not resolved")
        return program.text


def resolve_source(source: str, base: Path) -> str:
    for candidate in (base / source, PROGRAM_DIR / source):
        if candidate.is_file():
            return candidate.read_text(encoding="utf-8")
    raise FileNotFoundError(f"Program source {source!r} not found near {base} or in {PROGRAM_DIR}")


def scenario_from_dict(d: dict[str, Any], base: Path | None = None) -> Scenario:
    """Validate a scenario document, inlining every program source it references."""
    base = base if base is not None else PROGRAM_DIR
    d2 = dict(d)
    programs = []
    for raw in d2.get("programs", []):
        p = dict(raw)
        if p.get("source") is not None:
            p["text"] = resolve_source(p.pop("source"), base)
        programs.append(p)
    d2["programs"] = programs
    return Scenario(**d2)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists() and (SCENARIO_DIR / path).exists():
        path = SCENARIO_DIR / path
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict):
        raise ValueError(f"{path} does not hold a scenario mapping")
    return scenario_from_dict(doc, base=path.parent)


def list_scenarios(directory: str | Path = SCENARIO_DIR) -> list[Path]:
    return sorted(Path(directory).glob("*.yml"))

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal

from pydantic import ConfigDict, Field, field_validator
from pydantic.dataclasses import dataclass

from shadow_worlds.common.utils import _atomic_write_text

FileKind = Literal["plain", "protected", "library", "image", "manifest"]
DEVICES = frozenset({"/dev/random", "/dev/urandom", "/dev/null"})


@dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class FileEntry:
    kind: FileKind = "plain"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> FileEntry:
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}


@dataclass(config=ConfigDict(extra="forbid"))
class SandboxCatalog:
    """What the scenario provisioned into the sandbox, by guest path."""

    version: int = 1
    files: dict[str, FileEntry] = Field(default_factory=dict)

    @field_validator("version")
    @classmethod
    def _version_must_be_1(cls, v: int) -> int:
        if v != 1:
            raise ValueError("Expected version 1")
        return v

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "files": {name: entry.to_dict() for name, entry in self.files.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SandboxCatalog:
        d2 = dict(d)
        d2["files"] = {k: FileEntry.from_dict(v) for k, v in dict(d.get("files", {})).items()}
        return cls(**d2)

    @classmethod
    def load(cls, catalog_path: str | Path) -> SandboxCatalog:
        catalog_path = Path(catalog_path)
        if not catalog_path.exists():
            return cls()
        return cls.from_dict(json.loads(catalog_path.read_text(encoding="utf-8")))

    def save(self, catalog_path: str | Path) -> Path:
        catalog_path = Path(catalog_path)
        text = json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"
        _atomic_write_text(catalog_path, text)
        return catalog_path

    def kind_of(self, name: str) -> FileKind:
        entry = self.files.get(name)
        return entry.kind if entry is not None else "plain"


class Sandbox:
    """Host directory standing in for the normal world's filesystem."""

    def __init__(self, path: str | Path, exist_ok: bool = True) -> None:
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=exist_ok)
        self.catalog_path = self.path / "sandbox.json"
        if self.catalog_path.exists():
            self.catalog = SandboxCatalog.load(self.catalog_path)
        else:
            self.catalog = SandboxCatalog()
            self.catalog.save(self.catalog_path)

    def host_path(self, name: str) -> Path:
        if not name.startswith("/"):
            raise ValueError(f"Guest paths are absolute, got {name!r}")
        host = (self.path / "fs" / name.lstrip("/")).resolve()
        root = (self.path / "fs").resolve()
        if root != host and root not in host.parents:
            raise PermissionError(f"{name!r} escapes the sandbox")
        return host

    def register(self, name: str, kind: FileKind) -> None:
        self.catalog.files[name] = FileEntry(kind=kind)
        self.catalog.save(self.catalog_path)

    def provision(self, name: str, data: bytes, kind: FileKind = "plain") -> Path:
        host = self.host_path(name)
        host.parent.mkdir(parents=True, exist_ok=True)
        host.write_bytes(data)
        self.register(name, kind)
        return host

    def is_protected(self, name: str) -> bool:
        return self.catalog.kind_of(name) == "protected"

    def exists(self, name: str) -> bool:
        return name in DEVICES or self.host_path(name).is_file()

    def size(self, name: str) -> int:
        host = self.host_path(name)
        return host.stat().st_size if host.is_file() else 0

    def create(self, name: str, truncate: bool = False) -> None:
        host = self.host_path(name)
        host.parent.mkdir(parents=True, exist_ok=True)
        if truncate or not host.exists():
            host.write_bytes(b"")

    def read(self, name: str, offset: int, length: int) -> bytes:
        with self.host_path(name).open("rb") as f:
            f.seek(offset)
            return f.read(length)

    def write(self, name: str, offset: int, data: bytes) -> int:
        host = self.host_path(name)
        host.parent.mkdir(parents=True, exist_ok=True)
        if not host.exists():
            host.write_bytes(b"")
        with host.open("r+b") as f:
            f.seek(offset)
            f.write(data)
        return len(data)

    def read_all(self, name: str) -> bytes:
        host = self.host_path(name)
        return host.read_bytes() if host.is_file() else b""

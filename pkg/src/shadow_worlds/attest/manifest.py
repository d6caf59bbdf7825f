"""Signed per-application manifest (.hapm).

Canonical serialization, little-endian throughout:

    "HAPM" | version u32
    app_name        : bytes field
    entry           : u32
    segments        : count u32, (vaddr u32, length u32, flags u32, kind u32)*
    app_key_wrapped : bytes field
    integrity_list  : count u32, (vaddr u32, sha256[32])*
    library_lists   : count u32, (name bytes field, count u32, (offset u32, sha256[32])*)*
    protected_files : count u32, (name bytes field)*
    signature       : bytes field

A bytes field is a u32 length followed by the bytes. The signature covers every byte
before the signature field.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Final

from pydantic import ConfigDict, Field
from pydantic.dataclasses import dataclass

from shadow_worlds.attest.keys import DeviceKeys, DevicePublic, sign, verify_signature, wrap_app_key
from shadow_worlds.common.errors import ManifestRejected
from shadow_worlds.common.utils import PAGE_SIZE, _atomic_write_bytes, page_ceil
from shadow_worlds.guest.image import segment_page
from shadow_worlds.guest.models import GuestImage
from shadow_worlds.paging.models import HashEntry, IntegrityList, LibraryHashList
from shadow_worlds.vault.models import AppKey

MANIFEST_MAGIC: Final = b"HAPM"
MANIFEST_VERSION: Final = 1
_U32 = struct.Struct("<I")
_KINDS: Final = ("code", "data")


@dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class SegmentLayout:
    vaddr: int
    length: int
    flags: int
    kind: str

    def to_dict(self) -> dict[str, Any]:
        return {"vaddr": self.vaddr, "length": self.length, "flags": self.flags, "kind": self.kind}


@dataclass(frozen=True, config=ConfigDict(extra="forbid"))
class Manifest:
    app_name: str
    entry: int
    segments: tuple[SegmentLayout, ...]
    app_key_wrapped: bytes
    integrity_list: IntegrityList
    library_lists: tuple[LibraryHashList, ...] = ()
    protected_files: tuple[str, ...] = ()
    signature: bytes = Field(default=b"")

    def body_bytes(self) -> bytes:
        w = _Writer()
        w.raw(MANIFEST_MAGIC)
        w.u32(MANIFEST_VERSION)
        w.field(self.app_name.encode("utf-8"))
        w.u32(self.entry)
        w.u32(len(self.segments))
        for seg in self.segments:
            for v in (seg.vaddr, seg.length, seg.flags, _KINDS.index(seg.kind)):
                w.u32(v)
        w.field(self.app_key_wrapped)
        _write_entries(w, self.integrity_list.entries)
        w.u32(len(self.library_lists))
        for lib in self.library_lists:
            w.field(lib.name.encode("utf-8"))
            _write_entries(w, lib.entries)
        w.u32(len(self.protected_files))
        for name in self.protected_files:
            w.field(name.encode("utf-8"))
        return w.getvalue()

    def to_bytes(self) -> bytes:
        w = _Writer()
        w.raw(self.body_bytes())
        w.field(self.signature)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> Manifest:
        r = _Reader(raw)
        try:
            if r.raw(4) != MANIFEST_MAGIC:
                raise ManifestRejected("Bad manifest magic")
            if r.u32() != MANIFEST_VERSION:
                raise ManifestRejected("Unsupported manifest version")
            app_name = r.field().decode("utf-8")
            entry = r.u32()
            segments = tuple(
                SegmentLayout(r.u32(), r.u32(), r.u32(), _KINDS[r.u32()]) for _ in range(r.u32())
            )
            wrapped = r.field()
            integrity = IntegrityList(entries=_read_entries(r))
            libs = tuple(
                LibraryHashList(name=r.field().decode("utf-8"), entries=_read_entries(r))
                for _ in range(r.u32())
            )
            protected = tuple(r.field().decode("utf-8") for _ in range(r.u32()))
            signature = r.field()
            if not r.done():
                raise ManifestRejected("Trailing bytes after signature")
        except (struct.error, IndexError, UnicodeDecodeError, ValueError) as e:
            raise ManifestRejected(f"Malformed manifest: {e}") from e
        return cls(
            app_name=app_name,
            entry=entry,
            segments=segments,
            app_key_wrapped=wrapped,
            integrity_list=integrity,
            library_lists=libs,
            protected_files=protected,
            signature=signature,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "app_name": self.app_name,
            "entry": self.entry,
            "segments": [s.to_dict() for s in self.segments],
            "app_key_wrapped": self.app_key_wrapped.hex(),
            "integrity_list": [e.to_dict() for e in self.integrity_list.entries],
            "library_lists": [
                {"name": lib.name, "entries": [e.to_dict() for e in lib.entries]}
                for lib in self.library_lists
            ],
            "protected_files": list(self.protected_files),
            "signature": self.signature.hex(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, manifest_path: str | Path) -> Manifest:
        return cls.from_bytes(Path(manifest_path).read_bytes())

    def save(self, manifest_path: str | Path) -> Path:
        manifest_path = Path(manifest_path)
        _atomic_write_bytes(manifest_path, self.to_bytes())
        return manifest_path

    def library(self, name: str) -> LibraryHashList | None:
        for lib in self.library_lists:
            if lib.name == name:
                return lib
        return None


class _Writer:
    def __init__(self) -> None:
        self._buf = bytearray()

    def raw(self, data: bytes) -> None:
        self._buf += data

    def u32(self, value: int) -> None:
        self._buf += _U32.pack(value)

    def field(self, data: bytes) -> None:
        self.u32(len(data))
        self._buf += data

    def getvalue(self) -> bytes:
        return bytes(self._buf)


class _Reader:
    def __init__(self, raw: bytes) -> None:
        self._raw = raw
        self._pos = 0

    def raw(self, n: int) -> bytes:
        if self._pos + n > len(self._raw):
            raise ValueError("truncated")
        out = self._raw[self._pos : self._pos + n]
        self._pos += n
        return out

    def u32(self) -> int:
        return int(_U32.unpack(self.raw(4))[0])

    def field(self) -> bytes:
        return self.raw(self.u32())

    def done(self) -> bool:
        return self._pos == len(self._raw)


def _write_entries(w: _Writer, entries: tuple[HashEntry, ...]) -> None:
    w.u32(len(entries))
    for e in entries:
        w.u32(e.key)
        w.raw(e.digest)


def _read_entries(r: _Reader) -> tuple[HashEntry, ...]:
    return tuple(HashEntry(key=r.u32(), digest=r.raw(32)) for _ in range(r.u32()))


def page_hashes(content: bytes, base: int = 0) -> tuple[HashEntry, ...]:
    padded = content.ljust(page_ceil(max(len(content), 1)), b"\0")
    return tuple(
        HashEntry(key=base + off, digest=hashlib.sha256(padded[off : off + PAGE_SIZE]).digest())
        for off in range(0, len(padded), PAGE_SIZE)
    )


def manifest_build(
    image: GuestImage,
    protected: list[str],
    app_key: AppKey,
    device_keys: DeviceKeys,
    libraries: dict[str, bytes] | None = None,
    app_name: str = "",
) -> Manifest:
    entries: list[HashEntry] = []
    for seg in image.segments:
        for vaddr in range(seg.vaddr, seg.end, PAGE_SIZE):
            digest = hashlib.sha256(segment_page(seg, vaddr)).digest()
            entries.append(HashEntry(key=vaddr, digest=digest))
    libraries = libraries or {}
    unsigned = Manifest(
        app_name=app_name,
        entry=image.entry,
        segments=tuple(
            SegmentLayout(s.vaddr, s.length, s.flags, s.kind) for s in image.segments
        ),
        app_key_wrapped=wrap_app_key(app_key, device_keys.public.wrap_key),
        integrity_list=IntegrityList(entries=tuple(sorted(entries, key=lambda e: e.key))),
        library_lists=tuple(
            LibraryHashList(name=name, entries=page_hashes(libraries[name]))
            for name in sorted(libraries)
        ),
        protected_files=tuple(protected),
    )
    return resign(unsigned, device_keys.private.sign_key)


def resign(manifest: Manifest, sign_key: bytes) -> Manifest:
    body = manifest.body_bytes()
    return Manifest.from_bytes(body + _U32.pack(64) + sign(sign_key, body))


def manifest_verify(m: Manifest, device_public: DevicePublic) -> bool:
    return verify_signature(device_public.verify_key, m.signature, m.body_bytes())


def verify_manifest_bytes(raw: bytes, device_public: DevicePublic) -> Manifest:
    manifest = Manifest.from_bytes(raw)
    if not manifest_verify(manifest, device_public):
        raise ManifestRejected("Manifest signature does not verify")
    return manifest

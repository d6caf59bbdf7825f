from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Final

from shadow_worlds.common.errors import VaultViolation
from shadow_worlds.common.utils import PAGE_SIZE, page_ceil

VAULT_MAGIC: Final = b"HAPV"
VAULT_VERSION: Final = 1
VAULT_MAX_PAGES: Final = 256
NONCE: Final = struct.Struct("<IQ")
NONCE_LEN: Final = NONCE.size
TAG_LEN: Final = 16
KEY_LEN: Final = 32
BODY_BLOB: Final = NONCE_LEN + PAGE_SIZE + TAG_LEN
META_PAGES: Final = 3
META_PLAIN: Final = META_PAGES * PAGE_SIZE
META_BLOB: Final = NONCE_LEN + META_PLAIN + TAG_LEN
META_INDEX: Final = 0xFFFFFFFF
ZERO_PAGE_HASH: Final = hashlib.sha256(bytes(PAGE_SIZE)).digest()

_META_HEADER = struct.Struct("<4sIIQQQI")
_META_ENTRY = struct.Struct("<32sQ")
EPOCH_MAX: Final = (1 << 64) - 1


def file_id_for(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


def body_offset(page_index: int) -> int:
    """Byte offset of a body blob in the on-disk file."""
    return META_BLOB + page_index * BODY_BLOB


@dataclass(frozen=True)
class AppKey:
    key: bytes

    def __post_init__(self) -> None:
        if len(self.key) != KEY_LEN:
            raise ValueError(f"AppKey must be {KEY_LEN} bytes, got {len(self.key)}")

    def __repr__(self) -> str:
        return "AppKey(<redacted>)"


@dataclass
class VaultMeta:
    real_length: int = 0
    last_access: int = 0
    epoch: int = 0
    page_hashes: list[bytes] = field(default_factory=list)
    page_epochs: list[int] = field(default_factory=list)

    @property
    def page_count(self) -> int:
        return len(self.page_hashes)

    def grow_to(self, length: int) -> None:
        """Extend real length, filling new page entries as zero holes."""
        if length <= self.real_length:
            return
        if page_ceil(length) // PAGE_SIZE > VAULT_MAX_PAGES:
            raise ValueError(f"Protected files are limited to {VAULT_MAX_PAGES} pages")
        self.real_length = length
        while len(self.page_hashes) < page_ceil(length) // PAGE_SIZE:
            self.page_hashes.append(ZERO_PAGE_HASH)
            self.page_epochs.append(0)

    def pack(self, file_id: int) -> bytes:
        out = bytearray(META_PLAIN)
        _META_HEADER.pack_into(
            out,
            0,
            VAULT_MAGIC,
            VAULT_VERSION,
            file_id,
            self.real_length,
            self.last_access,
            self.epoch,
            self.page_count,
        )
        pos = _META_HEADER.size
        for digest, epoch in zip(self.page_hashes, self.page_epochs, strict=True):
            _META_ENTRY.pack_into(out, pos, digest, epoch)
            pos += _META_ENTRY.size
        return bytes(out)

    @classmethod
    def unpack(cls, raw: bytes, file_id: int, strict: bool = True) -> VaultMeta:
        magic, version, fid, real_length, last_access, epoch, count = _META_HEADER.unpack_from(
            raw, 0
        )
        if strict and (magic != VAULT_MAGIC or version != VAULT_VERSION or fid != file_id):
            raise VaultViolation("VaultAuthFailure", "meta header does not match file")
        count = min(count, VAULT_MAX_PAGES)
        hashes: list[bytes] = []
        epochs: list[int] = []
        pos = _META_HEADER.size
        for _ in range(count):
            digest, page_epoch = _META_ENTRY.unpack_from(raw, pos)
            hashes.append(digest)
            epochs.append(page_epoch)
            pos += _META_ENTRY.size
        if strict and count != page_ceil(real_length) // PAGE_SIZE:
            raise VaultViolation("VaultAuthFailure", "meta page count disagrees with length")
        return cls(real_length, last_access, epoch, hashes, epochs)


@dataclass
class VaultFile:
    name: str
    file_id: int
    meta: VaultMeta = field(default_factory=VaultMeta)
    dirty: set[int] = field(default_factory=set)

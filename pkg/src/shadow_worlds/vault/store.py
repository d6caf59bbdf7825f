from pathlib import Path

from shadow_worlds.common.utils import PAGE_SIZE, _atomic_write_bytes, page_ceil
from shadow_worlds.vault.models import BODY_BLOB, META_BLOB, AppKey, VaultFile, body_offset
from shadow_worlds.vault.vault import (
    open_meta,
    read_plaintext,
    seal_meta,
    vault_create,
    vault_seal_page,
)


class VaultStore:
    """Protected files as they sit in normal-world storage (one host file each).

    On-disk layout: the sealed meta blob, then one sealed blob per body page.
    """

    def __init__(self, root: str | Path, protected: list[str]) -> None:
        self.root = Path(root)
        self.protected = list(protected)

    def host_path(self, name: str) -> Path:
        return self.root / name.lstrip("/")

    def exists(self, name: str) -> bool:
        p = self.host_path(name)
        return p.exists() and p.stat().st_size >= META_BLOB

    def create(self, name: str, key: AppKey) -> VaultFile | None:
        if self.exists(name):
            return self.load(name, key)
        file = vault_create(name, key, self.protected)
        if file is None:
            return None
        _atomic_write_bytes(self.host_path(name), seal_meta(file, key))
        return file

    def load(self, name: str, key: AppKey) -> VaultFile:
        raw = self.host_path(name).read_bytes()
        return open_meta(name, raw[:META_BLOB], key)

    def body_blob(self, name: str, page_index: int) -> bytes:
        raw = self.host_path(name).read_bytes()
        return raw[body_offset(page_index) : body_offset(page_index) + BODY_BLOB]

    def seal_file(self, name: str, plaintext: bytes, key: AppKey) -> VaultFile:
        """Write a complete protected file in one go (fixtures, provisioning)."""
        file = vault_create(name, key, self.protected)
        if file is None:
            raise KeyError(f"{name} is not a protected file")
        file.meta.grow_to(len(plaintext))
        padded = plaintext.ljust(page_ceil(len(plaintext)), b"\0")
        blobs = [
            vault_seal_page(file, i, padded[i * PAGE_SIZE : (i + 1) * PAGE_SIZE], key)
            for i in range(len(padded) // PAGE_SIZE)
        ]
        meta = seal_meta(file, key)
        _atomic_write_bytes(self.host_path(name), meta + b"".join(blobs))
        return file

    def read_file(self, name: str, key: AppKey) -> bytes:
        file = self.load(name, key)
        blobs = [self.body_blob(name, i) for i in range(file.meta.page_count)]
        return read_plaintext(file, blobs, key)

import hashlib
import logging

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from shadow_worlds.common.errors import VaultViolation
from shadow_worlds.common.utils import PAGE_SIZE, setup_logging
from shadow_worlds.vault.models import (
    BODY_BLOB,
    EPOCH_MAX,
    META_BLOB,
    META_INDEX,
    META_PLAIN,
    NONCE,
    NONCE_LEN,
    VAULT_MAX_PAGES,
    AppKey,
    VaultFile,
    VaultMeta,
    file_id_for,
)

setup_logging()
logger = logging.getLogger(__name__)


def _nonce(file_id: int, epoch: int) -> bytes:
    """File id then the full 64-bit epoch; the page index is bound through the AAD."""
    return NONCE.pack(file_id, epoch)


def _next_epoch(file: VaultFile) -> int:
    if file.meta.epoch >= EPOCH_MAX:
        raise VaultViolation("VaultAuthFailure", f"{file.name}: epoch counter exhausted")
    file.meta.epoch += 1
    return file.meta.epoch


def _aad(file_id: int, index: int) -> bytes:
    return b"HAPV" + file_id.to_bytes(4, "little") + (index & 0xFFFFFFFF).to_bytes(4, "little")


def _ctr_decrypt(key: AppKey, blob: bytes) -> bytes:
    """Raw GCM keystream decryption, no authentication."""
    nonce, ct = blob[:NONCE_LEN], blob[NONCE_LEN:-16]
    decryptor = Cipher(algorithms.AES(key.key), modes.CTR(nonce + b"\x00\x00\x00\x02")).decryptor()
    return decryptor.update(ct) + decryptor.finalize()


def vault_create(name: str, key: AppKey, protected: list[str]) -> VaultFile | None:
    """Fresh, empty protected file; None when the name is not protected."""
    if name not in protected:
        return None
    logger.debug(f"vault_create({name})")
    return VaultFile(name=name, file_id=file_id_for(name), meta=VaultMeta())


def vault_seal_page(file: VaultFile, page_index: int, plaintext: bytes, key: AppKey) -> bytes:
    if len(plaintext) != PAGE_SIZE:
        raise ValueError(f"Expected a {PAGE_SIZE}-byte page, got {len(plaintext)}")
    if not 0 <= page_index < VAULT_MAX_PAGES:
        raise ValueError(f"Page index {page_index} out of range")
    meta = file.meta
    if page_index >= meta.page_count:
        meta.grow_to(max(meta.real_length, page_index * PAGE_SIZE + 1))
    nonce = _nonce(file.file_id, _next_epoch(file))
    ct = AESGCM(key.key).encrypt(nonce, plaintext, _aad(file.file_id, page_index))
    meta.page_hashes[page_index] = hashlib.sha256(plaintext).digest()
    meta.page_epochs[page_index] = meta.epoch
    return nonce + ct


def vault_unseal_page(
    file: VaultFile, page_index: int, blob: bytes, key: AppKey, verify: bool = True
) -> bytes:
    meta = file.meta
    if page_index >= meta.page_count or meta.page_epochs[page_index] == 0:
        return bytes(PAGE_SIZE)
    if not verify:
        return _ctr_decrypt(key, blob[:BODY_BLOB])[:PAGE_SIZE].ljust(PAGE_SIZE, b"\0")
    expected = _nonce(file.file_id, meta.page_epochs[page_index])
    if len(blob) != BODY_BLOB or blob[:NONCE_LEN] != expected:
        raise VaultViolation("VaultAuthFailure", f"{file.name} page {page_index}: stale nonce")
    try:
        plaintext = AESGCM(key.key).decrypt(
            expected, blob[NONCE_LEN:], _aad(file.file_id, page_index)
        )
    except InvalidTag as e:
        raise VaultViolation(
            "VaultAuthFailure", f"{file.name} page {page_index}: authentication failed"
        ) from e
    if hashlib.sha256(plaintext).digest() != meta.page_hashes[page_index]:
        raise VaultViolation("VaultHashMismatch", f"{file.name} page {page_index}")
    return plaintext


def seal_meta(file: VaultFile, key: AppKey) -> bytes:
    nonce = _nonce(file.file_id, _next_epoch(file))
    aad = _aad(file.file_id, META_INDEX)
    ct = AESGCM(key.key).encrypt(nonce, file.meta.pack(file.file_id), aad)
    return nonce + ct


def open_meta(name: str, blob: bytes, key: AppKey, verify: bool = True) -> VaultFile:
    file_id = file_id_for(name)
    if not verify:
        plain = _ctr_decrypt(key, blob[:META_BLOB]).ljust(META_PLAIN, b"\0")
        return VaultFile(name, file_id, VaultMeta.unpack(plain, file_id, strict=False))
    if len(blob) != META_BLOB:
        raise VaultViolation("VaultAuthFailure", f"{name}: meta is {len(blob)} bytes")
    nonce = blob[:NONCE_LEN]
    nonce_file, nonce_epoch = NONCE.unpack(nonce)
    if nonce_file != file_id:
        raise VaultViolation("VaultAuthFailure", f"{name}: meta nonce does not belong to file")
    try:
        plain = AESGCM(key.key).decrypt(nonce, blob[NONCE_LEN:], _aad(file_id, META_INDEX))
    except InvalidTag as e:
        raise VaultViolation("VaultAuthFailure", f"{name}: meta authentication failed") from e
    meta = VaultMeta.unpack(plain, file_id)
    if meta.epoch != nonce_epoch:
        raise VaultViolation("VaultAuthFailure", f"{name}: meta epoch mismatch")
    return VaultFile(name, file_id, meta)


def vault_meta_touch(file: VaultFile, now: int, key: AppKey) -> bytes:
    """Record an access time and return the re-sealed meta blob."""
    file.meta.last_access = now
    return seal_meta(file, key)


def read_plaintext(file: VaultFile, blobs: list[bytes], key: AppKey) -> bytes:
    pages = [vault_unseal_page(file, i, blob, key) for i, blob in enumerate(blobs)]
    return b"".join(pages)[: file.meta.real_length]

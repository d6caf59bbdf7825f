import random
from pathlib import Path

import pytest

from shadow_worlds.common.errors import VaultViolation
from shadow_worlds.common.utils import PAGE_SIZE
from shadow_worlds.vault.models import (
    BODY_BLOB,
    EPOCH_MAX,
    META_BLOB,
    NONCE,
    NONCE_LEN,
    AppKey,
)
from shadow_worlds.vault.store import VaultStore
from shadow_worlds.vault.vault import (
    open_meta,
    seal_meta,
    vault_create,
    vault_seal_page,
    vault_unseal_page,
)

NAME = "/vault/secret.txt"


@pytest.fixture
def key() -> AppKey:
    return AppKey(bytes(range(32)))


def _page(rng: random.Random) -> bytes:
    return rng.randbytes(PAGE_SIZE)


def _flip(blob: bytes, bit: int) -> bytes:
    out = bytearray(blob)
    out[bit // 8] ^= 1 << (bit % 8)
    return bytes(out)


def test_unprotected_name_is_not_a_vault(key: AppKey) -> None:
    assert vault_create("/tmp/plain.txt", key, [NAME]) is None
    file = vault_create(NAME, key, [NAME])
    assert file is not None and file.meta.page_count == 0


def test_app_key_length_and_repr() -> None:
    with pytest.raises(ValueError):
        AppKey(b"short")
    assert "redacted" in repr(AppKey(bytes(32)))


def test_seal_then_unseal(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    page = _page(rng)
    blob = vault_seal_page(file, 1, page, key)
    assert len(blob) == BODY_BLOB
    assert vault_unseal_page(file, 1, blob, key) == page
    # page 0 became a hole when page 1 was written
    assert vault_unseal_page(file, 0, bytes(BODY_BLOB), key) == bytes(PAGE_SIZE)
    assert vault_unseal_page(file, 7, b"", key) == bytes(PAGE_SIZE)


def test_every_single_bit_flip_of_a_body_blob_is_rejected(
    key: AppKey, rng: random.Random
) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    blob = vault_seal_page(file, 0, _page(rng), key)
    for bit in range(len(blob) * 8):
        with pytest.raises(VaultViolation):
            vault_unseal_page(file, 0, _flip(blob, bit), key)


def test_truncated_body_blob_rejected(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    blob = vault_seal_page(file, 0, _page(rng), key)
    with pytest.raises(VaultViolation) as e:
        vault_unseal_page(file, 0, blob[:-1], key)
    assert e.value.reason == "VaultAuthFailure"


def test_replayed_old_page_rejected(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    old = vault_seal_page(file, 0, _page(rng), key)
    new_page = _page(rng)
    new = vault_seal_page(file, 0, new_page, key)
    with pytest.raises(VaultViolation) as e:
        vault_unseal_page(file, 0, old, key)
    assert e.value.reason == "VaultAuthFailure"
    assert vault_unseal_page(file, 0, new, key) == new_page


def test_page_hash_disagreement_detected(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    blob = vault_seal_page(file, 0, _page(rng), key)
    file.meta.page_hashes[0] = bytes(32)
    with pytest.raises(VaultViolation) as e:
        vault_unseal_page(file, 0, blob, key)
    assert e.value.reason == "VaultHashMismatch"


def test_pages_cannot_be_swapped(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    first = vault_seal_page(file, 0, _page(rng), key)
    vault_seal_page(file, 1, _page(rng), key)
    with pytest.raises(VaultViolation):
        vault_unseal_page(file, 1, first, key)


def test_unchecked_unseal_is_malleable(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    page = _page(rng)
    blob = vault_seal_page(file, 0, page, key)
    assert vault_unseal_page(file, 0, blob, key, verify=False) == page
    tampered = vault_unseal_page(file, 0, _flip(blob, NONCE_LEN * 8 + 3), key, verify=False)
    assert tampered == _flip(page, 3)


def test_meta_opens_with_matching_key(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    vault_seal_page(file, 2, _page(rng), key)
    blob = seal_meta(file, key)
    assert len(blob) == META_BLOB
    opened = open_meta(NAME, blob, key)
    assert opened.meta == file.meta
    with pytest.raises(VaultViolation):
        open_meta("/vault/other.txt", blob, key)
    with pytest.raises(VaultViolation):
        open_meta(NAME, blob, AppKey(bytes(32)))


def test_every_single_bit_flip_of_the_meta_is_rejected(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    vault_seal_page(file, 0, _page(rng), key)
    blob = seal_meta(file, key)
    for bit in range(META_BLOB * 8):
        with pytest.raises(VaultViolation):
            open_meta(NAME, _flip(blob, bit), key)


def test_store_round_trip(tmp_path: Path, key: AppKey, rng: random.Random) -> None:
    store = VaultStore(tmp_path, [NAME])
    data = rng.randbytes(PAGE_SIZE + 123)
    store.seal_file(NAME, data, key)
    host = store.host_path(NAME)
    assert host == tmp_path / "vault" / "secret.txt"
    assert host.stat().st_size == META_BLOB + 2 * BODY_BLOB
    assert data not in host.read_bytes()
    assert store.read_file(NAME, key) == data
    with pytest.raises(KeyError):
        store.seal_file("/etc/passwd", b"x", key)


def test_store_create_reuses_existing_file(tmp_path: Path, key: AppKey) -> None:
    store = VaultStore(tmp_path, [NAME])
    store.seal_file(NAME, b"kept", key)
    file = store.create(NAME, key)
    assert file is not None and file.meta.real_length == 4
    assert store.create("/unprotected", key) is None


def test_nonce_is_file_id_then_epoch(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    blobs = [vault_seal_page(file, i, _page(rng), key) for i in range(3)]
    for i, blob in enumerate(blobs):
        assert blob[:NONCE_LEN] == NONCE.pack(file.file_id, file.meta.page_epochs[i])
    meta = seal_meta(file, key)
    assert meta[:NONCE_LEN] == NONCE.pack(file.file_id, file.meta.epoch)
    assert len({b[:NONCE_LEN] for b in [*blobs, meta]}) == 4


def test_resealing_the_same_page_never_repeats_ciphertext(key: AppKey) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    page = bytes(PAGE_SIZE)
    first = vault_seal_page(file, 0, page, key)
    second = vault_seal_page(file, 0, page, key)
    assert first[:NONCE_LEN] != second[:NONCE_LEN]
    assert first[NONCE_LEN:] != second[NONCE_LEN:]


def test_epochs_beyond_32_bits_round_trip(key: AppKey, rng: random.Random) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    file.meta.epoch = 2**32 + 5
    page = _page(rng)
    blob = vault_seal_page(file, 0, page, key)
    assert file.meta.page_epochs[0] == 2**32 + 6
    assert vault_unseal_page(file, 0, blob, key) == page
    opened = open_meta(NAME, seal_meta(file, key), key)
    assert opened.meta == file.meta
    assert vault_unseal_page(opened, 0, blob, key) == page


def test_exhausted_epoch_refuses_to_seal(key: AppKey) -> None:
    file = vault_create(NAME, key, [NAME])
    assert file is not None
    file.meta.epoch = EPOCH_MAX
    with pytest.raises(VaultViolation):
        vault_seal_page(file, 0, bytes(PAGE_SIZE), key)
    with pytest.raises(VaultViolation):
        seal_meta(file, key)
    assert file.meta.epoch == EPOCH_MAX

import hashlib
from pathlib import Path

import pytest

from shadow_worlds.attest.boot import boot_sequence, build_runtime_image
from shadow_worlds.attest.keys import (
    DeviceKeys,
    VendorKeys,
    app_key_for,
    seal_device_keys,
    unwrap_app_key,
)
from shadow_worlds.attest.manifest import (
    Manifest,
    manifest_build,
    manifest_verify,
    verify_manifest_bytes,
)
from shadow_worlds.common.errors import BootHalt, ManifestRejected
from shadow_worlds.common.layout import CODE_BASE
from shadow_worlds.guest.image import assemble_file, segment_page
from shadow_worlds.guest.models import GuestImage
from shadow_worlds.harness.scenario import PROGRAM_DIR
from shadow_worlds.machine.machine import Machine

DEVICE_SEED = 2
VENDOR_SEED = 1


@pytest.fixture(scope="module")
def device() -> DeviceKeys:
    return DeviceKeys.from_seed(DEVICE_SEED)


@pytest.fixture(scope="module")
def image() -> GuestImage:
    return assemble_file(PROGRAM_DIR / "hello.hasm")


def _manifest(
    image: GuestImage, device: DeviceKeys, libraries: dict[str, bytes] | None = None
) -> Manifest:
    key = app_key_for(DEVICE_SEED, "hello")
    return manifest_build(
        image, ["/vault/notes.txt"], key, device, libraries=libraries, app_name="hello"
    )


def _provisioned(vendor: VendorKeys, device: DeviceKeys) -> Machine:
    m = Machine()
    m.fuses = vendor.fuse_digest()
    m.zmk = device.zmk
    return m


def test_keys_are_deterministic() -> None:
    assert DeviceKeys.from_seed(7) == DeviceKeys.from_seed(7)
    assert DeviceKeys.from_seed(7).public != DeviceKeys.from_seed(8).public
    assert "redacted" in repr(DeviceKeys.from_seed(7).private)


def test_manifest_signed_by_device_verifies(image: GuestImage, device: DeviceKeys) -> None:
    m = _manifest(image, device)
    assert manifest_verify(m, device.public)
    assert verify_manifest_bytes(m.to_bytes(), device.public) == m
    assert not manifest_verify(m, DeviceKeys.from_seed(DEVICE_SEED + 1).public)


def test_integrity_list_covers_every_image_page(image: GuestImage, device: DeviceKeys) -> None:
    m = _manifest(image, device)
    pages = sum(seg.length // 4096 for seg in image.segments)
    assert len(m.integrity_list) == pages
    code = image.segments[0]
    expected = hashlib.sha256(segment_page(code, CODE_BASE)).digest()
    assert m.integrity_list.lookup(CODE_BASE) == expected
    assert m.protected_files == ("/vault/notes.txt",)


def test_library_hashes_keyed_by_offset(image: GuestImage, device: DeviceKeys) -> None:
    m = _manifest(image, device, libraries={"/lib/libm.so": b"\x7f" * 5000})
    lib = m.library("/lib/libm.so")
    assert lib is not None and len(lib.entries) == 2
    padded = (b"\x7f" * 5000).ljust(8192, b"\0")
    assert lib.lookup(4096) == hashlib.sha256(padded[4096:]).digest()
    assert m.library("/lib/other.so") is None


def test_every_byte_flip_rejected(image: GuestImage, device: DeviceKeys) -> None:
    raw = _manifest(image, device).to_bytes()
    for i in range(len(raw)):
        tampered = raw[:i] + bytes([raw[i] ^ 0x01]) + raw[i + 1 :]
        with pytest.raises(ManifestRejected):
            verify_manifest_bytes(tampered, device.public)


def test_truncated_and_extended_manifest_rejected(image: GuestImage, device: DeviceKeys) -> None:
    raw = _manifest(image, device).to_bytes()
    with pytest.raises(ManifestRejected):
        verify_manifest_bytes(raw[:-1], device.public)
    with pytest.raises(ManifestRejected):
        verify_manifest_bytes(raw + b"\0", device.public)


def test_manifest_file(tmp_path: Path, image: GuestImage, device: DeviceKeys) -> None:
    m = _manifest(image, device)
    path = m.save(tmp_path / "hello.hapm")
    assert Manifest.load(path) == m
    assert '"app_name": "hello"' in m.to_json()


def test_app_key_unwraps_only_on_its_device(image: GuestImage, device: DeviceKeys) -> None:
    m = _manifest(image, device)
    key = unwrap_app_key(m.app_key_wrapped, device.private.unwrap_key)
    assert key == app_key_for(DEVICE_SEED, "hello")
    other = DeviceKeys.from_seed(DEVICE_SEED + 1)
    with pytest.raises(ValueError):
        unwrap_app_key(m.app_key_wrapped, other.private.unwrap_key)


def test_boot_runs_six_steps(device: DeviceKeys) -> None:
    vendor = VendorKeys.from_seed(VENDOR_SEED)
    m = _provisioned(vendor, device)
    raw = build_runtime_image(vendor).to_bytes()
    booted = boot_sequence(m, raw, seal_device_keys(device), device.public, {})
    assert booted.steps_completed == 6
    assert booted.device_private == device.private
    assert booted.runtime_image.settings()["reserved_app_pages"] == 8
    assert m.config.locked
    assert m.world == "normal"
    assert [e.get("step") for e in m.trace.of_kind("BOOT")] == [1, 2, 3, 4, 5, 6]


def test_foreign_runtime_image_halts_at_rom(device: DeviceKeys) -> None:
    m = _provisioned(VendorKeys.from_seed(VENDOR_SEED), device)
    raw = build_runtime_image(VendorKeys.from_seed(VENDOR_SEED + 1)).to_bytes()
    with pytest.raises(BootHalt) as e:
        boot_sequence(m, raw, seal_device_keys(device), device.public, {})
    assert e.value.step == 1
    assert not m.config.locked


def test_modified_runtime_payload_halts_at_rom(device: DeviceKeys) -> None:
    vendor = VendorKeys.from_seed(VENDOR_SEED)
    m = _provisioned(vendor, device)
    raw = build_runtime_image(vendor).to_bytes()
    tampered = raw.replace(b'"reserved_app_pages": 8', b'"reserved_app_pages": 9')
    assert tampered != raw
    with pytest.raises(BootHalt) as e:
        boot_sequence(m, tampered, seal_device_keys(device), device.public, {})
    assert e.value.step == 1


def test_unchecked_boot_accepts_foreign_image(device: DeviceKeys) -> None:
    m = _provisioned(VendorKeys.from_seed(VENDOR_SEED), device)
    raw = build_runtime_image(VendorKeys.from_seed(VENDOR_SEED + 1)).to_bytes()
    booted = boot_sequence(m, raw, seal_device_keys(device), device.public, {}, verify=False)
    assert not booted.image_authentic


def test_wrong_zmk_halts_at_unseal(device: DeviceKeys) -> None:
    vendor = VendorKeys.from_seed(VENDOR_SEED)
    m = _provisioned(vendor, device)
    m.zmk = DeviceKeys.from_seed(DEVICE_SEED + 1).zmk
    raw = build_runtime_image(vendor).to_bytes()
    with pytest.raises(BootHalt) as e:
        boot_sequence(m, raw, seal_device_keys(device), device.public, {})
    assert e.value.step == 5
    assert m.config.locked


def test_boot_needs_a_fresh_machine(device: DeviceKeys) -> None:
    vendor = VendorKeys.from_seed(VENDOR_SEED)
    m = _provisioned(vendor, device)
    m.zone_lock()
    with pytest.raises(BootHalt) as e:
        boot_sequence(m, build_runtime_image(vendor).to_bytes(), b"", device.public, {})
    assert e.value.step == 0

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any

from shadow_worlds import __version__
from shadow_worlds.attest.keys import (
    DevicePrivate,
    DevicePublic,
    VendorKeys,
    sign,
    unseal_device_keys,
    verify_signature,
)
from shadow_worlds.attest.manifest import _Reader, _Writer
from shadow_worlds.common.errors import BootHalt, ManifestRejected
from shadow_worlds.common.utils import setup_logging
from shadow_worlds.machine.machine import Machine
from shadow_worlds.machine.models import ZoneConfig
from shadow_worlds.paging.models import LibraryHashList

setup_logging()
logger = logging.getLogger(__name__)

RUNTIME_MAGIC = b"SWRT"

ManifestStore = dict[str, LibraryHashList]


@dataclass(frozen=True)
class RuntimeImage:
    """Vendor-signed runtime bundle the boot ROM checks against the fuses."""

    vendor_key: bytes
    payload: bytes
    signature: bytes

    def to_bytes(self) -> bytes:
        w = _Writer()
        w.raw(RUNTIME_MAGIC)
        w.field(self.vendor_key)
        w.field(self.payload)
        w.field(self.signature)
        return w.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> RuntimeImage:
        r = _Reader(raw)
        try:
            if r.raw(4) != RUNTIME_MAGIC:
                raise ValueError("bad magic")
            return cls(vendor_key=r.field(), payload=r.field(), signature=r.field())
        except ValueError as e:
            raise ManifestRejected(f"Malformed runtime image: {e}") from e

    def settings(self) -> dict[str, Any]:
        return dict(json.loads(self.payload.decode("utf-8")))


def build_runtime_image(vendor: VendorKeys, reserved_app_pages: int = 8) -> RuntimeImage:
    payload = json.dumps(
        {
            "name": "shadow-worlds-runtime",
            "version": __version__,
            "reserved_app_pages": reserved_app_pages,
        },
        sort_keys=True,
    ).encode("utf-8")
    return RuntimeImage(vendor.verify_key, payload, sign(vendor.sign_key, payload))


@dataclass
class BootedSystem:
    runtime_image: RuntimeImage
    device_public: DevicePublic
    device_private: DevicePrivate
    manifest_store: ManifestStore = field(default_factory=dict)
    steps_completed: int = 0
    image_authentic: bool = True


def _step(machine: Machine, step: int, name: str, ok: bool = True) -> None:
    machine.trace.append("BOOT", step=step, name=name, ok=ok)
    if ok:
        logger.info(f"Boot step {step} ({name}) complete")


def boot_sequence(
    machine: Machine,
    runtime_image: bytes,
    sealed_keys: bytes,
    device_public: DevicePublic,
    manifest_store: ManifestStore,
    zones: ZoneConfig | None = None,
    verify: bool = True,
) -> BootedSystem:
    if machine.world != "secure" or machine.config.locked:
        raise BootHalt(0, "boot requires a freshly reset machine")

    # 1. boot ROM checks the runtime image against the fused vendor key digest
    try:
        image = RuntimeImage.from_bytes(runtime_image)
        authentic = machine.fuses == hashlib.sha256(image.vendor_key).digest() and (
            verify_signature(image.vendor_key, image.signature, image.payload)
        )
        image.settings()
    except (ManifestRejected, ValueError) as e:
        _step(machine, 1, "rom_verify", ok=False)
        raise BootHalt(1, f"runtime image unreadable: {e}") from e
    if not authentic and verify:
        _step(machine, 1, "rom_verify", ok=False)
        raise BootHalt(1, "runtime image signature does not match fused key")
    _step(machine, 1, "rom_verify")

    # 2. runtime programs and locks the address space controller
    if zones is not None:
        machine.reconfigure(zones)
    machine.zone_lock()
    _step(machine, 2, "zone_lock")

    # 3. bootloader and OS start in the normal world
    machine.cross("normal", "boot")
    _step(machine, 3, "normal_boot")

    # 4. OS hands sealed keys and manifests to the secure world
    machine.cross("secure", "key_handoff")
    _step(machine, 4, "key_handoff")

    # 5. runtime unseals the device key pair with the ZMK
    try:
        private = unseal_device_keys(sealed_keys, machine.zmk, device_public)
    except ValueError as e:
        _step(machine, 5, "unseal", ok=False)
        raise BootHalt(5, str(e)) from e
    _step(machine, 5, "unseal")

    # 6. control returns to the OS
    machine.cross("normal", "boot_done")
    _step(machine, 6, "return_to_os")

    return BootedSystem(
        runtime_image=image,
        device_public=device_public,
        device_private=private,
        manifest_store=dict(manifest_store),
        steps_completed=6,
        image_authentic=authentic,
    )

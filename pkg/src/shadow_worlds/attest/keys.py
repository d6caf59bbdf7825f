"""Device, vendor and per-application key material.

Everything is derived from the scenario seed with HKDF so runs are replayable.
Ed25519 signs, X25519 + HKDF + AES-GCM wraps application keys, AES-GCM under the
ZMK seals the device private keys at rest.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from shadow_worlds.vault.models import AppKey

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw
_NOENC = serialization.NoEncryption()


def derive(secret: bytes, label: str, length: int = 32) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=length,
        salt=b"shadow-worlds",
        info=label.encode("utf-8"),
    ).derive(secret)


def seed_bytes(seed: int) -> bytes:
    return (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")


@dataclass(frozen=True)
class DevicePublic:
    verify_key: bytes
    wrap_key: bytes

    def digest(self) -> bytes:
        return hashlib.sha256(self.verify_key + self.wrap_key).digest()


@dataclass(frozen=True)
class DevicePrivate:
    sign_key: bytes
    unwrap_key: bytes

    def __repr__(self) -> str:
        return "DevicePrivate(<redacted>)"

    def raw(self) -> bytes:
        return self.sign_key + self.unwrap_key


@dataclass(frozen=True)
class DeviceKeys:
    public: DevicePublic
    private: DevicePrivate
    zmk: bytes

    @classmethod
    def from_seed(cls, seed: int) -> DeviceKeys:
        s = seed_bytes(seed)
        sign = Ed25519PrivateKey.from_private_bytes(derive(s, "device-sign"))
        wrap = X25519PrivateKey.from_private_bytes(derive(s, "device-wrap"))
        public = DevicePublic(
            verify_key=sign.public_key().public_bytes(_RAW, _RAW_PUB),
            wrap_key=wrap.public_key().public_bytes(_RAW, _RAW_PUB),
        )
        private = DevicePrivate(
            sign_key=sign.private_bytes(_RAW, _RAW_PRIV, _NOENC),
            unwrap_key=wrap.private_bytes(_RAW, _RAW_PRIV, _NOENC),
        )
        return cls(public=public, private=private, zmk=derive(s, "zmk"))


@dataclass(frozen=True)
class VendorKeys:
    """Signs runtime images; its public key digest is burned into the fuses."""

    sign_key: bytes
    verify_key: bytes

    @classmethod
    def from_seed(cls, seed: int) -> VendorKeys:
        sign = Ed25519PrivateKey.from_private_bytes(derive(seed_bytes(seed), "vendor-sign"))
        return cls(
            sign_key=sign.private_bytes(_RAW, _RAW_PRIV, _NOENC),
            verify_key=sign.public_key().public_bytes(_RAW, _RAW_PUB),
        )

    def fuse_digest(self) -> bytes:
        return hashlib.sha256(self.verify_key).digest()


def app_key_for(seed: int, app_name: str) -> AppKey:
    return AppKey(derive(seed_bytes(seed), f"app:{app_name}"))


def sign(private_key: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_key).sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def wrap_app_key(app_key: AppKey, wrap_public: bytes) -> bytes:
    eph = X25519PrivateKey.from_private_bytes(derive(app_key.key + wrap_public, "ephemeral"))
    eph_pub = eph.public_key().public_bytes(_RAW, _RAW_PUB)
    shared = eph.exchange(X25519PublicKey.from_public_bytes(wrap_public))
    kek = derive(shared, "app-key-wrap:" + eph_pub.hex())
    return eph_pub + AESGCM(kek).encrypt(bytes(12), app_key.key, eph_pub)


def unwrap_app_key(wrapped: bytes, unwrap_private: bytes) -> AppKey:
    """Raises ValueError when the blob was not wrapped for this device."""
    eph_pub, ct = wrapped[:32], wrapped[32:]
    try:
        priv = X25519PrivateKey.from_private_bytes(unwrap_private)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        kek = derive(shared, "app-key-wrap:" + eph_pub.hex())
        return AppKey(AESGCM(kek).decrypt(bytes(12), ct, eph_pub))
    except InvalidTag as e:
        raise ValueError("Wrapped application key does not belong to this device") from e


def seal_device_keys(keys: DeviceKeys) -> bytes:
    nonce = hashlib.sha256(b"sealed-device-keys" + keys.public.digest()).digest()[:12]
    return nonce + AESGCM(keys.zmk).encrypt(nonce, keys.private.raw(), keys.public.digest())


def unseal_device_keys(sealed: bytes, zmk: bytes, public: DevicePublic) -> DevicePrivate:
    try:
        raw = AESGCM(zmk).decrypt(sealed[:12], sealed[12:], public.digest())
    except InvalidTag as e:
        raise ValueError("Sealed device keys failed authentication") from e
    return DevicePrivate(sign_key=raw[:32], unwrap_key=raw[32:])

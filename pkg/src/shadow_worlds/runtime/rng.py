from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from shadow_worlds.attest.keys import derive, seed_bytes


class TrustedRng:
    """Seeded ChaCha20 keystream standing in for the on-board hardware generator."""

    def __init__(self, seed: int, stream: int) -> None:
        key = derive(seed_bytes(seed), f"rng:{stream}")
        nonce = bytes(16)
        self._enc = Cipher(algorithms.ChaCha20(key, nonce), mode=None).encryptor()
        self.drawn = 0

    def read(self, n: int) -> bytes:
        self.drawn += n
        return self._enc.update(bytes(n))

import os
from dataclasses import dataclass


@dataclass(frozen=True)
class RuntimeConfig:
    seed: int | None
    max_steps: int
    verify: bool


def _flag(name: str) -> bool:
    return os.getenv(name, "").strip().lower() in ("1", "true", "yes", "on")


def load_config() -> RuntimeConfig:
    seed = os.getenv("SHADOWWORLDS_SEED")
    return RuntimeConfig(
        seed=int(seed, 0) if seed else None,
        max_steps=int(os.getenv("SHADOWWORLDS_MAX_STEPS", "200000")),
        verify=not _flag("SHADOWWORLDS_UNSAFE_NO_VERIFY"),
    )

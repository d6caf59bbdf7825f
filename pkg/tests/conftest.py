import random
from pathlib import Path

import pytest

from shadow_worlds.harness.scenario import Scenario, load_scenario, scenario_from_dict
from shadow_worlds.runtime.config import RuntimeConfig


@pytest.fixture
def config() -> RuntimeConfig:
    """Environment-independent runtime settings."""
    return RuntimeConfig(seed=None, max_steps=200_000, verify=True)


@pytest.fixture
def unverified() -> RuntimeConfig:
    return RuntimeConfig(seed=None, max_steps=200_000, verify=False)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0x5EED)


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch: pytest.MonkeyPatch) -> None:
    for name in ("SHADOWWORLDS_SEED", "SHADOWWORLDS_MAX_STEPS", "SHADOWWORLDS_UNSAFE_NO_VERIFY"):
        monkeypatch.delenv(name, raising=False)


def bundled(name: str) -> Scenario:
    return load_scenario(f"{name}.yml")


def inline(
    text: str,
    name: str = "inline",
    protected: list[str] | None = None,
    files: list[dict[str, str]] | None = None,
    seed: int = 1,
) -> Scenario:
    """One-program scenario around assembly text."""
    program = {"name": name, "text": text, "protected": protected or []}
    doc = {"name": name, "seed": seed, "programs": [program], "files": files or []}
    return scenario_from_dict(doc, base=Path("."))

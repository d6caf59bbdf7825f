import pytest

from shadow_worlds.runtime.config import RuntimeConfig, load_config


def test_defaults() -> None:
    assert load_config() == RuntimeConfig(seed=None, max_steps=200_000, verify=True)


def test_env_overrides(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("SHADOWWORLDS_SEED", "0x10")
    monkeypatch.setenv("SHADOWWORLDS_MAX_STEPS", "500")
    cfg = load_config()
    assert cfg.seed == 16
    assert cfg.max_steps == 500


@pytest.mark.parametrize("value, verify", [("1", False), ("YES", False), ("off", True), ("", True)])
def test_unsafe_flag(monkeypatch: pytest.MonkeyPatch, value: str, verify: bool) -> None:
    monkeypatch.setenv("SHADOWWORLDS_UNSAFE_NO_VERIFY", value)
    assert load_config().verify is verify

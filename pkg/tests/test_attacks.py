import shutil
from pathlib import Path

import pytest

from shadow_worlds.cli import MIN_UNVERIFIED_SUCCESSES
from shadow_worlds.harness.attacks import (
    ATTACK_DIR,
    attack_suite,
    load_attack,
    results_frame,
    run_attack,
    summarize,
)
from shadow_worlds.harness.runner import run_scenario
from shadow_worlds.osemu.models import FAULT_IDS, FaultId, OsPolicy
from shadow_worlds.runtime.config import RuntimeConfig


@pytest.mark.parametrize("fault", FAULT_IDS)
def test_attack_is_contained(fault: FaultId, config: RuntimeConfig) -> None:
    result = run_attack(load_attack(fault), config)
    assert result.fault == fault
    assert result.contained, result.detail
    assert result.leaked_bytes == 0


@pytest.mark.parametrize("fault", FAULT_IDS)
def test_attack_scenario_meets_expectation(fault: FaultId, config: RuntimeConfig) -> None:
    result = run_scenario(load_attack(fault), config=config).result()
    assert result.ok, result.verdict.describe()


def test_attack_file_must_inject_its_fault(tmp_path: Path) -> None:
    shutil.copy(ATTACK_DIR / "OverlapBrk.yml", tmp_path / "OverlapMmap.yml")
    with pytest.raises(ValueError, match="does not inject"):
        load_attack("OverlapMmap", tmp_path)


def test_honest_policy_cannot_be_attacked(config: RuntimeConfig) -> None:
    scenario = load_attack("OverlapMmap").with_policy(OsPolicy.honest())
    with pytest.raises(ValueError, match="no fault"):
        run_attack(scenario, config)


def test_unverified_runtime_lets_attacks_through(config: RuntimeConfig) -> None:
    results = attack_suite(verify=False, config=config)
    summary = summarize(results)
    assert summary["total"] == len(FAULT_IDS)
    assert summary["total"] - summary["contained"] >= MIN_UNVERIFIED_SUCCESSES


def test_suite_report_frame(config: RuntimeConfig) -> None:
    faults: list[FaultId] = ["OversizeReadReturn", "TamperManifest"]
    results = attack_suite(faults=faults, config=config)
    df = results_frame(results)
    assert list(df["fault"]) == faults
    assert df["contained"].all()
    summary = summarize(results)
    assert summary["contained"] == summary["total"] == 2

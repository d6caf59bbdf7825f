"""Run every adversarial-OS fault against its scenario and classify what it achieved."""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import replace
from pathlib import Path

import pandas as pd

from shadow_worlds.common.utils import setup_logging
from shadow_worlds.harness.models import CONTAINED, AttackOutcome, AttackResult
from shadow_worlds.harness.runner import ShieldedRun, run_scenario
from shadow_worlds.harness.scenario import SCENARIO_DIR, Scenario, load_scenario
from shadow_worlds.osemu.models import FAULT_IDS, FaultId, OsPolicy
from shadow_worlds.runtime.config import RuntimeConfig, load_config

setup_logging()
logger = logging.getLogger(__name__)

ATTACK_DIR = SCENARIO_DIR / "attacks"


def load_attack(fault: FaultId, directory: str | Path = ATTACK_DIR) -> Scenario:
    scenario = load_scenario(Path(directory) / f"{fault}.yml")
    if fault not in scenario.policy.faults:
        raise ValueError(f"{scenario.name} does not inject {fault}")
    return scenario


def classify(attack: ShieldedRun, baseline: ShieldedRun) -> AttackOutcome:
    """Map an attacked run, next to its honest twin, onto an outcome.

    A leak outranks everything; a detected violation outranks silent divergence.
    """
    if attack.leaks.leaked:
        return "leaked"
    kind = attack.verdict.kind
    if kind == "boot_halt":
        return "boot_halt"
    if kind == "hap_killed":
        return "killed"
    if kind == "step_limit":
        return "timeout"
    if kind == "blocked":
        return "blocked"
    codes = attack.exit_codes()
    authentic = attack.booted is None or attack.booted.image_authentic
    if attack.verdict.digest == baseline.verdict.digest and codes == baseline.exit_codes():
        if authentic:
            return "no_effect"
        return "corrupted"
    if codes != baseline.exit_codes() and any(c is not None and c >= 128 for c in codes):
        return "crash"
    return "corrupted"


def run_attack(
    scenario: Scenario,
    config: RuntimeConfig | None = None,
    workdir: str | Path | None = None,
) -> AttackResult:
    config = config if config is not None else load_config()
    if not scenario.policy.faults:
        raise ValueError(f"{scenario.name} has no fault to inject")
    fault = scenario.policy.faults[0]
    base_dir = attack_dir = None
    if workdir is not None:
        base_dir, attack_dir = Path(workdir) / "baseline", Path(workdir) / "attack"

    baseline = run_scenario(scenario.with_policy(OsPolicy.honest()), base_dir, config)
    attack = run_scenario(scenario, attack_dir, config)
    outcome = classify(attack, baseline)
    result = AttackResult(
        fault=fault,
        outcome=outcome,
        contained=outcome in CONTAINED,
        verdict=attack.verdict.kind,
        reason=attack.verdict.reason,
        leaked_bytes=attack.leaks.labelled_bytes + attack.leaks.content_hits,
        applied=len(attack.os.faults_applied),
        detail=attack.verdict.describe(),
    )
    log = logger.info if result.contained else logger.warning
    log(f"{fault}: {outcome} ({result.detail}, applied {result.applied}x)")
    return result


def attack_suite(
    verify: bool = True,
    faults: Iterable[FaultId] = FAULT_IDS,
    config: RuntimeConfig | None = None,
    directory: str | Path = ATTACK_DIR,
) -> list[AttackResult]:
    """One attack per fault. With `verify` False the runtime's checks are disabled."""
    config = config if config is not None else load_config()
    config = replace(config, verify=verify)
    return [run_attack(load_attack(f, directory), config) for f in faults]


def results_frame(results: list[AttackResult]) -> pd.DataFrame:
    columns = list(AttackResult.model_fields)
    return pd.DataFrame([r.model_dump() for r in results], columns=columns)


def summarize(results: list[AttackResult]) -> dict[str, int]:
    df = results_frame(results)
    counts = df["outcome"].value_counts().to_dict() if len(df) else {}
    summary = {str(k): int(v) for k, v in counts.items()}
    summary["contained"] = int(df["contained"].sum()) if len(df) else 0
    summary["total"] = len(df)
    return summary

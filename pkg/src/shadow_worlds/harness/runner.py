"""Build a machine from a scenario, boot it, launch its programs and judge the outcome."""

from __future__ import annotations

import hashlib
import logging
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from shadow_worlds.attest.boot import (
    BootedSystem,
    ManifestStore,
    boot_sequence,
    build_runtime_image,
)
from shadow_worlds.attest.keys import DeviceKeys, VendorKeys, app_key_for, seal_device_keys
from shadow_worlds.attest.manifest import manifest_build, page_hashes
from shadow_worlds.common.errors import BootHalt
from shadow_worlds.common.utils import setup_logging
from shadow_worlds.guest.image import build_image, encode_image
from shadow_worlds.guest.models import GuestImage
from shadow_worlds.guest.parser import assemble
from shadow_worlds.guest.reference import DirectKernel, Process
from shadow_worlds.harness.models import Expectation, HapReport, LeakReport, RunResult, Verdict
from shadow_worlds.harness.scenario import Scenario
from shadow_worlds.harness.scheduler import RoundRobin, ScheduleResult
from shadow_worlds.harness.taint import TaintTracker
from shadow_worlds.machine.machine import Machine
from shadow_worlds.osemu.osemu import OsEmulator
from shadow_worlds.osemu.sandbox import Sandbox
from shadow_worlds.paging.models import LibraryHashList
from shadow_worlds.runtime.config import RuntimeConfig, load_config
from shadow_worlds.runtime.runtime import Runtime, rt_init
from shadow_worlds.vault.store import VaultStore

setup_logging()
logger = logging.getLogger(__name__)


def output_digest(outputs: list[bytes]) -> str:
    """SHA-256 over the HAP outputs in creation order, each prefixed by its u32 length."""
    h = hashlib.sha256()
    for out in outputs:
        h.update(len(out).to_bytes(4, "little"))
        h.update(out)
    return h.hexdigest()


def effective_seed(scenario: Scenario, config: RuntimeConfig) -> int:
    return config.seed if config.seed is not None else scenario.seed


def compile_programs(scenario: Scenario) -> dict[str, GuestImage]:
    return {p.name: build_image(assemble(scenario.source_of(p))) for p in scenario.programs}


def provision(
    scenario: Scenario, sandbox: Sandbox, seed: int, device: DeviceKeys, sealed: bool = True
) -> ManifestStore:
    """Write images, manifests and fixtures into a sandbox; returns the library store.

    With `sealed` False protected fixtures are stored as plaintext (reference mode).
    """
    images = compile_programs(scenario)
    libraries = {f.path: f.content() for f in scenario.files if f.kind == "library"}
    for p in scenario.programs:
        for path in p.protected:
            sandbox.register(path, "protected")
    for f in scenario.files:
        if f.kind == "protected" and sealed:
            owner = scenario.owner_of(f)
            store = VaultStore(sandbox.path / "fs", owner.protected)
            store.seal_file(f.path, f.content(), app_key_for(seed, owner.name))
            sandbox.register(f.path, "protected")
        else:
            sandbox.provision(f.path, f.content(), f.kind)
    for p in scenario.programs:
        image = images[p.name]
        sandbox.provision(p.image_path, encode_image(image), "image")
        manifest = manifest_build(
            image,
            p.protected,
            app_key_for(seed, p.name),
            device,
            libraries={name: libraries[name] for name in p.libraries if name in libraries},
            app_name=p.name,
        )
        sandbox.provision(p.manifest_path, manifest.to_bytes(), "manifest")
    return {
        name: LibraryHashList(name=name, entries=page_hashes(data))
        for name, data in sorted(libraries.items())
    }


@dataclass
class ShieldedRun:
    scenario: Scenario
    machine: Machine
    os: OsEmulator
    runtime: Runtime | None
    booted: BootedSystem | None
    verdict: Verdict
    leaks: LeakReport
    steps: int
    launched: list[int]

    def outputs(self) -> list[bytes]:
        if self.runtime is None:
            return []
        return [bytes(h.output) for _, h in sorted(self.runtime.haps.items())]

    def exit_codes(self) -> list[int | None]:
        if self.runtime is None:
            return []
        return [h.exit_code for _, h in sorted(self.runtime.haps.items())]

    def hap_reports(self) -> list[HapReport]:
        if self.runtime is None:
            return []
        return [
            HapReport(
                hap_id=h.hap_id,
                pid=h.pid,
                app=h.manifest.app_name,
                state=h.state,
                exit_code=h.exit_code,
                kill_reason=h.kill_reason,
                output=bytes(h.output).decode("utf-8", errors="replace"),
                console=self.os.console(h.pid).decode("utf-8", errors="replace"),
            )
            for _, h in sorted(self.runtime.haps.items())
        ]

    def result(self, expected: Expectation | None = None) -> RunResult:
        expected = expected if expected is not None else self.scenario.expect
        ok = not self.leaks.leaked and (expected is None or expected.matches(self.verdict))
        return RunResult(
            ok=ok,
            scenario=self.scenario.name,
            verdict=self.verdict,
            expected=expected,
            haps=self.hap_reports(),
            leaks=self.leaks,
            metrics=self.machine.metrics.to_dict(),
            trace_digest=self.machine.trace.digest(),
            steps=self.steps,
        )


def judge(machine: Machine, runtime: Runtime, schedule: ScheduleResult) -> Verdict:
    """Earliest violation wins; otherwise how the scheduler stopped."""
    kills: list[tuple[int, str, int | None]] = []
    for hap in runtime.haps.values():
        if hap.state == "killed" and hap.kill_index is not None and hap.kill_reason is not None:
            kills.append((hap.kill_index, hap.kill_reason, hap.hap_id))
    for ev in machine.trace.of_kind("MANIFEST_REJECTED"):
        hap = ev.get("hap")
        kills.append((ev.index, "ManifestRejected", hap if isinstance(hap, int) else None))
    if kills:
        index, reason, hap_id = min(kills, key=lambda k: k[0])
        return Verdict(kind="hap_killed", reason=reason, index=index, hap=hap_id)
    if schedule.stop == "step_limit":
        return Verdict(kind="step_limit")
    if schedule.stop == "blocked":
        return Verdict(kind="blocked")
    outputs = [bytes(h.output) for _, h in sorted(runtime.haps.items())]
    return Verdict(kind="completes", digest=output_digest(outputs))


def _run_in(scenario: Scenario, workdir: Path, config: RuntimeConfig) -> ShieldedRun:
    seed = effective_seed(scenario, config)
    max_steps = scenario.max_steps or config.max_steps
    machine = Machine(scenario.zone_config())
    vendor = VendorKeys.from_seed(seed)
    device = DeviceKeys.from_seed(seed)
    machine.fuses = vendor.fuse_digest()
    machine.zmk = device.zmk

    sandbox = Sandbox(workdir / "shielded")
    store = provision(scenario, sandbox, seed, device)
    tracker = TaintTracker()
    os = OsEmulator(machine, sandbox, scenario.policy, seed=seed, sink=tracker.observe)

    raw_image = os.provide_runtime_image(build_runtime_image(vendor).to_bytes())
    try:
        booted = boot_sequence(
            machine,
            raw_image,
            seal_device_keys(device),
            device.public,
            store,
            verify=config.verify,
        )
    except BootHalt as e:
        logger.info(f"Scenario {scenario.name}: {e}")
        leaks = tracker.scan(machine, [])
        verdict = Verdict(kind="boot_halt", boot_step=e.step)
        return ShieldedRun(scenario, machine, os, None, None, verdict, leaks, 0, [])

    runtime = rt_init(machine, booted, config, seed)
    os.attach_runtime(runtime)
    launched = [
        os.tz_execve(p.image_path, p.manifest_path) for p in scenario.programs if p.launch
    ]
    schedule = RoundRobin(runtime, max_steps).run()
    if scenario.policy.adversarial:
        os.scrape()
    verdict = judge(machine, runtime, schedule)
    leaks = tracker.scan(machine, runtime.secrets)
    logger.info(f"Scenario {scenario.name}: {verdict.describe()} after {schedule.steps} steps")
    return ShieldedRun(
        scenario, machine, os, runtime, booted, verdict, leaks, schedule.steps, launched
    )


def run_scenario(
    scenario: Scenario, workdir: str | Path | None = None, config: RuntimeConfig | None = None
) -> ShieldedRun:
    """Run a scenario on the shielded stack. Without `workdir` the sandbox is temporary."""
    config = config if config is not None else load_config()
    if workdir is not None:
        return _run_in(scenario, Path(workdir), config)
    with tempfile.TemporaryDirectory(prefix="shadow-worlds-") as tmp:
        return _run_in(scenario, Path(tmp), config)


@dataclass
class ReferenceRun:
    scenario: Scenario
    processes: list[Process]
    steps: int
    kernel_traps: Counter[str] = field(default_factory=Counter)

    def outputs(self) -> list[bytes]:
        return [p.output for p in self.processes]

    @property
    def digest(self) -> str:
        return output_digest(self.outputs())


def _reference_in(scenario: Scenario, workdir: Path, config: RuntimeConfig) -> ReferenceRun:
    seed = effective_seed(scenario, config)
    sandbox = Sandbox(workdir / "reference")
    provision(scenario, sandbox, seed, DeviceKeys.from_seed(seed), sealed=False)
    kernel = DirectKernel(sandbox, seed=seed, max_steps=scenario.max_steps or config.max_steps)
    for p in scenario.programs:
        if p.launch:
            kernel.launch(p.image_path)
    kernel.run()
    return ReferenceRun(scenario, kernel.processes, kernel.steps, kernel.traps)


def run_reference(
    scenario: Scenario, workdir: str | Path | None = None, config: RuntimeConfig | None = None
) -> ReferenceRun:
    """Run the same programs unshielded under the direct-execution kernel."""
    config = config if config is not None else load_config()
    if workdir is not None:
        return _reference_in(scenario, Path(workdir), config)
    with tempfile.TemporaryDirectory(prefix="shadow-worlds-ref-") as tmp:
        return _reference_in(scenario, Path(tmp), config)

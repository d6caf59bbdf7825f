from pathlib import Path

import pytest

from conftest import bundled, inline
from shadow_worlds.harness.runner import output_digest, run_reference, run_scenario
from shadow_worlds.harness.scenario import Scenario, list_scenarios, load_scenario
from shadow_worlds.runtime.config import RuntimeConfig

BENIGN = [
    "hello",
    "counter_loop",
    "exit_code",
    "file_io",
    "file_mmap",
    "fp_rng",
    "futex_pair",
    "launcher",
    "library",
    "mmap_heap",
    "protected_rw",
    "secret_vault",
    "signals",
    "vault_update",
]


@pytest.mark.parametrize("path", list_scenarios(), ids=lambda p: p.stem)
def test_bundled_scenario_meets_expectation(path: Path, config: RuntimeConfig) -> None:
    result = run_scenario(load_scenario(path), config=config).result()
    assert result.ok, result.verdict.describe()
    assert not result.leaks.leaked


@pytest.mark.parametrize("name", BENIGN)
def test_shielded_output_matches_direct_execution(name: str, config: RuntimeConfig) -> None:
    scenario = bundled(name)
    shielded = run_scenario(scenario, config=config)
    reference = run_reference(scenario, config=config)
    assert shielded.verdict.kind == "completes"
    assert shielded.outputs() == reference.outputs()
    assert shielded.verdict.digest == reference.digest


def test_hello_output_and_pid(config: RuntimeConfig) -> None:
    run = run_scenario(bundled("hello"), config=config)
    assert run.outputs() == [b"hello from the secure world\npid 100\n"]
    assert run.exit_codes() == [0]
    assert run.verdict.digest == output_digest(run.outputs())


def test_exit_status_is_carried_through(config: RuntimeConfig) -> None:
    run = run_scenario(bundled("exit_code"), config=config)
    assert run.exit_codes() == [3]
    assert run.outputs() == [b"exiting with 3\n"]


def test_same_seed_same_trace(config: RuntimeConfig) -> None:
    first = run_scenario(bundled("file_io"), config=config).result()
    second = run_scenario(bundled("file_io"), config=config).result()
    assert first.trace_digest == second.trace_digest
    assert first.metrics == second.metrics


def test_boot_ends_in_normal_world_and_runs_every_step(config: RuntimeConfig) -> None:
    run = run_scenario(bundled("hello"), config=config)
    steps = [e.get("step") for e in run.machine.trace.of_kind("BOOT")]
    assert steps == [1, 2, 3, 4, 5, 6]
    assert run.machine.config.locked
    assert run.booted is not None and run.booted.image_authentic


def test_unmapped_store_kills_with_segfault(config: RuntimeConfig) -> None:
    run = run_scenario(inline('emit "a"\nstore 0x30000000 "boom"\nexit 0\n'), config=config)
    assert run.verdict.kind == "hap_killed"
    assert run.verdict.reason == "Segfault"
    assert run.outputs() == [b"a"]


def test_kernel_half_read_kills_with_kernel_access(config: RuntimeConfig) -> None:
    run = run_scenario(inline("load 0x80001000 4\nexit 0\n"), config=config)
    assert run.verdict.kind == "hap_killed"
    assert run.verdict.reason == "KernelAccess"


def test_step_budget_stops_a_spinning_hap(config: RuntimeConfig) -> None:
    run = run_scenario(bundled("spin"), config=config)
    assert run.verdict.kind == "step_limit"
    assert run.steps >= 400


def test_sandbox_holds_only_sealed_vault(tmp_path: Path, config: RuntimeConfig) -> None:
    scenario = bundled("secret_vault")
    run_scenario(scenario, tmp_path, config)
    sealed = (tmp_path / "shielded" / "fs" / "vault" / "credentials.txt").read_bytes()
    assert b"pin=4711" not in sealed
    assert b"token=ab12cd34" not in sealed


def _matches_reference(scenario: Scenario, config: RuntimeConfig) -> list[bytes]:
    shielded = run_scenario(scenario, config=config)
    reference = run_reference(scenario, config=config)
    assert shielded.verdict.kind == "completes", shielded.verdict.describe()
    assert shielded.outputs() == reference.outputs()
    return shielded.outputs()


BRK_SHRINK = """
    sys brk 0
    mov r4 r0
    mov r5 r4
    add r5 4096
    sys brk r5
    store r4 "OLDHEAP!"
    sys brk r4
    sys mmap r4 4096 PROT_READ|PROT_WRITE MAP_PRIVATE|MAP_ANONYMOUS|MAP_FIXED 0 0
    load r4 8
    emit acc
    sys munmap r4 4096
    sys brk r5
    load r4 8
    emit acc
    emit "\\n"
    exit 0
"""


def test_brk_shrink_scrubs_the_released_heap(config: RuntimeConfig) -> None:
    run = run_scenario(inline(BRK_SHRINK), config=config)
    assert run.outputs() == [bytes(16) + b"\n"]
    assert run.machine.trace.of_kind("PTE_REMOVE")
    assert _matches_reference(inline(BRK_SHRINK), config) == [bytes(16) + b"\n"]


MAP_FIXED_OVER_OWN = """
    sys mmap 0 8192 PROT_READ|PROT_WRITE MAP_PRIVATE|MAP_ANONYMOUS 0 0
    mov r6 r0
    store r6 "before"
    store r6+4096 "second"
    sys mmap r6 4096 PROT_READ|PROT_WRITE MAP_PRIVATE|MAP_ANONYMOUS|MAP_FIXED 0 0
    load r6 6
    emit acc
    load r6+4096 6
    emit acc
    store r6 "after!"
    load r6 6
    emit acc
    emit "\\n"
    exit 0
"""


def test_map_fixed_may_replace_an_own_mapping(config: RuntimeConfig) -> None:
    outputs = _matches_reference(inline(MAP_FIXED_OVER_OWN), config)
    assert outputs == [bytes(6) + b"second" + b"after!\n"]


def test_map_fixed_over_the_image_is_refused(config: RuntimeConfig) -> None:
    text = (
        '.data 0x20000 "keep"\n'
        "sys mmap 0x20000 4096 PROT_READ|PROT_WRITE MAP_PRIVATE|MAP_ANONYMOUS|MAP_FIXED 0 0\n"
        "exit 0\n"
    )
    run = run_scenario(inline(text), config=config)
    assert run.verdict.kind == "hap_killed"
    assert run.verdict.reason == "OverlapMapping"


VAULT_MMAP = """
.bss 0x20000 4096
    sys open "/vault/notes.bin" O_CREAT|O_RDWR
    mov r4 r0
    sys write r4 "hello vault" 11
    sys mmap 0 4096 PROT_READ|PROT_WRITE MAP_SHARED r4 0
    mov r5 r0
    load r5 11
    emit acc
    emit "\\n"
    store r5 "HELLO"
    sys munmap r5 4096
    sys mmap 0 4096 PROT_READ MAP_SHARED r4 0
    mov r5 r0
    load r5 11
    emit acc
    emit "\\n"
    sys munmap r5 4096
    sys close r4
    sys open "/vault/notes.bin" O_RDONLY
    mov r4 r0
    sys read r4 0x20000 64
    mov r6 r0
    sys close r4
    emit r6
    emit "\\n"
    load 0x20000 r6
    emit acc
    emit "\\n"
    exit 0
"""


def test_protected_file_mapping_round_trip(tmp_path: Path, config: RuntimeConfig) -> None:
    scenario = inline(VAULT_MMAP, protected=["/vault/notes.bin"])
    run = run_scenario(scenario, tmp_path, config)
    expected = [b"hello vault\nHELLO vault\n11\nHELLO vault\n"]
    assert run.verdict.kind == "completes", run.verdict.describe()
    assert run.outputs() == expected
    assert run_reference(scenario, config=config).outputs() == expected
    sealed = (tmp_path / "shielded" / "fs" / "vault" / "notes.bin").read_bytes()
    assert b"HELLO vault" not in sealed
    ops = [e.get("op") for e in run.machine.trace.of_kind("VAULT")]
    assert ops.count("mmap") == 2
    assert ops.count("munmap") == 2


def test_protected_file_opened_read_only_maps_read_only(config: RuntimeConfig) -> None:
    text = (
        'sys open "/vault/notes.bin" O_CREAT|O_RDWR\n'
        "mov r4 r0\n"
        "sys close r4\n"
        'sys open "/vault/notes.bin" O_RDONLY\n'
        "mov r4 r0\n"
        "sys mmap 0 4096 PROT_READ|PROT_WRITE MAP_SHARED r4 0\n"
        "emit r0\n"
        "exit 0\n"
    )
    run = run_scenario(inline(text, protected=["/vault/notes.bin"]), config=config)
    assert run.verdict.kind == "completes"
    assert run.outputs() == [str(2**32 - 13).encode("ascii")]

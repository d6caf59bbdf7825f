import random
from pathlib import Path

import pytest

from conftest import bundled, inline
from shadow_worlds.attest.keys import app_key_for
from shadow_worlds.common.layout import SYS_GETPID
from shadow_worlds.guest.interpreter import format_fp
from shadow_worlds.harness.runner import run_reference, run_scenario
from shadow_worlds.harness.scenario import Scenario, scenario_from_dict
from shadow_worlds.machine.models import RegisterFile
from shadow_worlds.osemu.sandbox import Sandbox
from shadow_worlds.runtime.config import RuntimeConfig
from shadow_worlds.vault.store import VaultStore

MARKER = 0x13572468


def _pair(first: str, second: str, files: list[dict[str, str]] | None = None) -> Scenario:
    doc = {
        "name": "pair",
        "seed": 4,
        "programs": [{"name": "first", "text": first}, {"name": "second", "text": second}],
        "files": files or [],
    }
    return scenario_from_dict(doc)


def test_os_never_sees_guest_registers(config: RuntimeConfig) -> None:
    text = (
        f"mov r8 {MARKER}\n"
        f"mov r9 {MARKER}\n"
        f"mov r12 {MARKER}\n"
        "fp set d3 2.75\n"
        "sys getpid\n"
        "exit 0\n"
    )
    calls: list[int] = []
    for scenario in (inline(text), bundled("spin")):
        run = run_scenario(scenario, config=config)
        visible = run.machine.os_visible
        assert visible
        for _, regs in visible:
            calls.append(regs.gp[7])
            assert MARKER not in regs.gp
            assert regs.gp[8:] == [0] * len(regs.gp[8:])
            assert (regs.pc, regs.sp, regs.lr) == (0, 0, 0)
            assert regs.fp == RegisterFile().fp
            assert not regs.fp_enabled
    assert SYS_GETPID in calls


def test_saved_context_survives_calls_faults_and_fp(config: RuntimeConfig) -> None:
    lines = [".bss 0x20000 8192"]
    lines += [f"mov r{i} {100 + i}" for i in range(1, 13)]
    lines += ["sys getpid", 'store 0x21000 "fault"', "fp set d0 1.0", "sys getpid"]
    for i in range(1, 13):
        lines += [f"emit r{i}", 'emit " "']
    lines += ["exit 0"]
    scenario = inline("\n".join(lines) + "\n")
    run = run_scenario(scenario, config=config)
    kept = [100 + i if i != 7 else SYS_GETPID for i in range(1, 13)]
    assert run.outputs() == ["".join(f"{v} " for v in kept).encode("ascii")]
    assert run.outputs() == run_reference(scenario, config=config).outputs()


def test_fp_registers_do_not_cross_haps(config: RuntimeConfig) -> None:
    first = "fp set d0 1.5\n" + "sys getpid\n" * 4 + 'emit d0\nemit "\\n"\nexit 0\n'
    second = (
        "fp add d1 d0 0.0\n"
        'emit d1\nemit "\\n"\n'
        "fp set d0 9.25\n"
        "sys getpid\nsys getpid\n"
        'emit d0\nemit "\\n"\n'
        "exit 0\n"
    )
    scenario = _pair(first, second)
    run = run_scenario(scenario, config=config)
    assert run.outputs() == [
        format_fp(1.5) + b"\n",
        format_fp(0.0) + b"\n" + format_fp(9.25) + b"\n",
    ]
    assert run.outputs() == run_reference(scenario, config=config).outputs()
    ops = [e.get("op") for e in run.machine.trace.of_kind("FP")]
    assert ops.count("enable") == 2
    assert "restore" in ops


def test_random_device_is_served_without_leaving_the_secure_world(
    config: RuntimeConfig,
) -> None:
    text = (
        ".bss 0x20000 4096\n"
        'store 0x20000 "x"\n'
        'sys open "/dev/urandom" O_RDONLY\n'
        "mov r4 r0\n"
        "sys read r4 0x20000 16\n"
        "sys read r4 0x20010 16\n"
        "load 0x20000 32\n"
        "emit acc\n"
        "exit 0\n"
    )
    run = run_scenario(inline(text), config=config)
    (out,) = run.outputs()
    assert len(out) == 32
    assert out[:16] != out[16:]
    assert bytes(16) not in (out[:16], out[16:])
    trace = run.machine.trace
    assert not [e for e in trace.of_kind("FORWARD") if e.get("what") == "read"]
    reads = [e for e in trace.of_kind("RESUME") if e.get("what") == "read"]
    assert [e.get("switches") for e in reads] == [0, 0]
    assert len(trace.of_kind("RNG")) == 2


NESTED_SIGNALS = """
.entry main
first:
    emit "first "
    emit r0
    emit "\\n"
    mov r9 1
    raise SIGUSR2
    emit "first done "
    emit r9
    emit "\\n"
    ret
second:
    emit "second "
    emit r0
    emit "\\n"
    mov r9 2
    ret
main:
    mov r9 77
    signal SIGUSR1 first
    signal SIGUSR2 second
    raise SIGUSR1
    emit "main "
    emit r9
    emit "\\n"
    exit 0
"""


def test_signal_raised_in_a_handler_waits_for_sigreturn(config: RuntimeConfig) -> None:
    scenario = inline(NESTED_SIGNALS)
    run = run_scenario(scenario, config=config)
    assert run.verdict.kind == "completes", run.verdict.describe()
    assert run.outputs() == [b"first 10\nfirst done 1\nsecond 12\nmain 77\n"]
    assert run.outputs() == run_reference(scenario, config=config).outputs()
    ops = [e.get("op") for e in run.machine.trace.of_kind("SIGNAL")]
    assert ops.count("deliver") == 2
    assert ops.count("return") == 2
    assert ops.index("return") < len(ops) - 1 - ops[::-1].index("deliver")


CONSUMER = """
    sys open "/data/shared.bin" O_RDWR
    mov r4 r0
    sys mmap 0 4096 PROT_READ|PROT_WRITE MAP_SHARED r4 0
    mov r5 r0
    mov r8 {delay}
pause:
    sys getpid
    sub r8 1
    jnz r8 pause
wait:
    futex_wait r5 0
    ldr r6 r5
    jz r6 wait
    load r5+4 12
    emit "consumer got "
    emit acc
    emit "\\n"
    exit 0
"""

PRODUCER = """
    sys open "/data/shared.bin" O_RDWR
    mov r4 r0
    sys mmap 0 4096 PROT_READ|PROT_WRITE MAP_SHARED r4 0
    mov r5 r0
    mov r8 {delay}
spin:
    sys getpid
    sub r8 1
    jnz r8 spin
    store r5+4 "ping-payload"
    store r5 x"01000000"
    futex_wake r5
    emit "producer published\\n"
    exit 0
"""


def test_futex_handoff_under_shuffled_timing(config: RuntimeConfig, rng: random.Random) -> None:
    files = [{"path": "/data/shared.bin", "hex": "00000000"}]
    for _ in range(12):
        consumer = CONSUMER.format(delay=rng.randrange(1, 16))
        producer = PRODUCER.format(delay=rng.randrange(1, 16))
        scenario = _pair(consumer, producer, files)
        run = run_scenario(scenario, config=config)
        assert run.verdict.kind == "completes", run.verdict.describe()
        assert run.outputs() == [b"consumer got ping-payload\n", b"producer published\n"]
        assert run.outputs() == run_reference(scenario, config=config).outputs()


CREDENTIALS = "/vault/credentials.txt"


def _hide_meta(monkeypatch: pytest.MonkeyPatch) -> None:
    original = Sandbox.read

    def read(self: Sandbox, name: str, offset: int, length: int) -> bytes:
        if name == CREDENTIALS and offset == 0:
            return b""
        return original(self, name, offset, length)

    monkeypatch.setattr(Sandbox, "read", read)


def test_existing_protected_file_served_empty_is_rejected(
    monkeypatch: pytest.MonkeyPatch, tmp_path: Path, config: RuntimeConfig
) -> None:
    _hide_meta(monkeypatch)
    run = run_scenario(bundled("secret_vault"), workdir=tmp_path, config=config)
    assert run.verdict.kind == "hap_killed"
    assert run.verdict.reason == "VaultAuthFailure"
    store = VaultStore(tmp_path / "shielded" / "fs", [CREDENTIALS])
    plaintext = store.read_file(CREDENTIALS, app_key_for(3, "keeper"))
    assert plaintext == b"pin=4711;token=ab12cd34\n"


def test_empty_meta_goes_unnoticed_without_checks(
    monkeypatch: pytest.MonkeyPatch, tmp_path: Path, unverified: RuntimeConfig
) -> None:
    _hide_meta(monkeypatch)
    run = run_scenario(bundled("secret_vault"), workdir=tmp_path, config=unverified)
    assert run.verdict.kind == "completes", run.verdict.describe()
    assert b"credential bytes: 0\n" in run.outputs()[0]

import json
from pathlib import Path

from click.testing import CliRunner

from shadow_worlds.cli import main
from shadow_worlds.common.io_parquet import read_report_parquet
from shadow_worlds.harness.scenario import PROGRAM_DIR


def test_list_names_bundled_scenarios() -> None:
    result = CliRunner().invoke(main, ["list"])
    assert result.exit_code == 0
    assert "hello" in result.output
    assert "secret_vault" in result.output


def test_run_bundled_scenario(tmp_path: Path) -> None:
    trace = tmp_path / "hello.trace"
    result = CliRunner().invoke(main, ["run", "hello", "--trace", str(trace)])
    assert result.exit_code == 0, result.output
    assert "completes" in result.output
    assert "pid 100" in result.output
    assert "BOOT" in trace.read_text(encoding="utf-8")


def test_run_json_reports_expectation() -> None:
    result = CliRunner().invoke(main, ["--seed", "5", "run", "segfault", "--json"])
    assert result.exit_code == 0, result.output
    doc = json.loads(result.output)
    assert doc["ok"] is True
    assert doc["verdict"]["reason"] == "Segfault"


def test_run_unknown_scenario_is_usage_error() -> None:
    result = CliRunner().invoke(main, ["run", "no_such_scenario"])
    assert result.exit_code == 2
    assert "not found" in result.output


def test_max_steps_must_be_positive() -> None:
    result = CliRunner().invoke(main, ["--max-steps", "0", "list"])
    assert result.exit_code == 2


def test_mkimage_mkmanifest_verify(tmp_path: Path) -> None:
    runner = CliRunner()
    image = tmp_path / "hello.hapi"
    manifest = tmp_path / "hello.manifest"

    result = runner.invoke(main, ["mkimage", str(PROGRAM_DIR / "hello.hasm"), str(image)])
    assert result.exit_code == 0, result.output
    result = runner.invoke(
        main, ["mkmanifest", str(image), "9", str(manifest), "--protected", "/vault/a.txt"]
    )
    assert result.exit_code == 0, result.output

    result = runner.invoke(main, ["verify-manifest", str(manifest), "--keys", "9"])
    assert result.exit_code == 0
    assert "OK (hello)" in result.output
    result = runner.invoke(main, ["verify-manifest", str(manifest), "--keys", "10"])
    assert result.exit_code == 1
    assert "REJECTED" in result.output


def test_mkmanifest_rejects_relative_protected_path(tmp_path: Path) -> None:
    runner = CliRunner()
    image = tmp_path / "hello.hapi"
    runner.invoke(main, ["mkimage", str(PROGRAM_DIR / "hello.hasm"), str(image)])
    result = runner.invoke(
        main, ["mkmanifest", str(image), "9", str(tmp_path / "m"), "--protected", "vault/a"]
    )
    assert result.exit_code == 2


def test_attacks_single_fault_report(tmp_path: Path) -> None:
    out = tmp_path / "reports" / "attacks.parquet"
    args = ["attacks", "--fault", "OversizeReadReturn", "--out", str(out)]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 0, result.output
    assert "killed" in result.output
    df = read_report_parquet(out)
    assert list(df["fault"]) == ["OversizeReadReturn"]
    assert bool(df["contained"].iloc[0])

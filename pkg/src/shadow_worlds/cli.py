"""Command-line entry point: run scenarios, the attack suite and the micro-benchmarks."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from shadow_worlds.attest.keys import DeviceKeys, app_key_for
from shadow_worlds.attest.manifest import manifest_build, verify_manifest_bytes
from shadow_worlds.common.errors import ImageError, ManifestRejected, ProgramError
from shadow_worlds.common.io_parquet import write_report_parquet
from shadow_worlds.common.utils import setup_logging
from shadow_worlds.guest.image import assemble_file, image_load, image_save
from shadow_worlds.harness.attacks import ATTACK_DIR, attack_suite, results_frame, summarize
from shadow_worlds.harness.bench import BENCH_DIR, bench, load_bench_config
from shadow_worlds.harness.runner import run_scenario
from shadow_worlds.harness.scenario import list_scenarios, load_scenario
from shadow_worlds.osemu.models import FAULT_IDS, FaultId
from shadow_worlds.runtime.config import RuntimeConfig, load_config

setup_logging()
logger = logging.getLogger(__name__)

# With the runtime's checks off, at least this many attacks must get through.
MIN_UNVERIFIED_SUCCESSES = 15


@click.group()
@click.option("--seed", type=int, default=None, help="Override every scenario seed.")
@click.option("--max-steps", type=int, default=None, help="Scheduler step budget.")
@click.pass_context
def main(ctx: click.Context, seed: int | None, max_steps: int | None) -> None:
    config = load_config()
    if seed is not None:
        config = replace(config, seed=seed)
    if max_steps is not None:
        if max_steps <= 0:
            raise click.BadParameter("must be positive", param_hint="--max-steps")
        config = replace(config, max_steps=max_steps)
    ctx.obj = config


@main.command("list")
def list_cmd() -> None:
    """List the bundled scenarios."""
    for path in list_scenarios():
        scenario = load_scenario(path)
        click.echo(f"{path.stem:<16} {scenario.description}")


@main.command()
@click.argument("scenario")
@click.option("--workdir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--json", "as_json", is_flag=True, help="Print the full result as JSON.")
@click.pass_obj
def run(config: RuntimeConfig, scenario: str, workdir: Path | None, trace_path: Path | None,
        as_json: bool) -> None:
    """Run SCENARIO (a path or a bundled scenario name) on the shielded stack."""
    path = Path(scenario)
    if not path.suffix:
        path = path.with_suffix(".yml")
    try:
        sc = load_scenario(path)
    except FileNotFoundError as e:
        raise click.UsageError(f"Scenario {scenario} not found") from e
    except (ValueError, ProgramError) as e:
        raise click.UsageError(f"Invalid scenario {scenario}: {e}") from e

    shielded = run_scenario(sc, workdir, config)
    result = shielded.result()
    if trace_path is not None:
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        trace_path.write_text(shielded.machine.trace.text(), encoding="utf-8")

    if as_json:
        click.echo(result.model_dump_json(indent=2))
    else:
        click.echo(f"{result.scenario}: {result.verdict.describe()}")
        for hap in result.haps:
            click.echo(f"  hap {hap.hap_id} ({hap.app}) {hap.state} exit={hap.exit_code}")
            if hap.output:
                click.echo("    " + hap.output.rstrip("\n").replace("\n", "\n    "))
        if result.leaks.leaked:
            click.echo(f"  LEAK: {result.leaks.model_dump()}")
        click.echo(f"  trace digest {result.trace_digest}")
    sys.exit(0 if result.ok else 1)


@main.command()
@click.option("--no-verify", is_flag=True, help="Disable the runtime's checks.")
@click.option("--fault", "faults", multiple=True, type=click.Choice(FAULT_IDS))
@click.option("--dir", "directory", type=click.Path(file_okay=False, path_type=Path),
              default=ATTACK_DIR, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.pass_obj
def attacks(config: RuntimeConfig, no_verify: bool, faults: tuple[FaultId, ...], directory: Path,
            out: Path | None) -> None:
    """Run one attack per adversarial-OS fault and classify the outcome."""
    selected = faults or FAULT_IDS
    results = attack_suite(not no_verify, selected, config, directory)
    df = results_frame(results)
    click.echo(df[["fault", "outcome", "contained", "reason"]].to_string(index=False))
    summary = summarize(results)
    click.echo(json.dumps(summary, sort_keys=True))
    if out is not None:
        write_report_parquet(df, out)
        logger.info(f"Attack report written to {out}")

    if not no_verify:
        ok = summary["contained"] == summary["total"]
    elif faults:
        ok = True
    else:
        ok = summary["total"] - summary["contained"] >= MIN_UNVERIFIED_SUCCESSES
    sys.exit(0 if ok else 1)


@main.command("bench")
@click.argument("config_path", required=False, type=click.Path(path_type=Path),
                default=BENCH_DIR / "micro.yml")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.pass_obj
def bench_cmd(config: RuntimeConfig, config_path: Path, out: Path | None) -> None:
    """Measure the counter-level cost of basic OS operations."""
    try:
        bench_config = load_bench_config(config_path)
    except FileNotFoundError as e:
        raise click.UsageError(f"Bench config {config_path} not found") from e
    df = bench(bench_config, config)
    columns = ["operation", "switches", "zeroizations", "page_copies", "hash_ops", "unseals",
               "ae_ops", "copied", "reference_traps", "switch_ratio"]
    click.echo(df[columns].to_string(index=False))
    if out is not None:
        write_report_parquet(df, out)
        logger.info(f"Bench report written to {out}")


@main.command()
@click.argument("program", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
def mkimage(program: Path, out: Path) -> None:
    """Assemble PROGRAM into an image file."""
    try:
        image = assemble_file(program)
    except (ProgramError, ImageError) as e:
        raise click.UsageError(f"{program}: {e}") from e
    image_save(image, out)
    click.echo(f"{out}: entry {image.entry:#x}, {len(image.segments)} segments")


@main.command()
@click.argument("image_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("keys", type=int)
@click.argument("out", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--app", default=None, help="Application name; defaults to the image stem.")
@click.option("--protected", multiple=True, help="Protected file path, repeatable.")
def mkmanifest(image_path: Path, keys: int, out: Path, app: str | None,
               protected: tuple[str, ...]) -> None:
    """Build and sign the manifest of an image; KEYS is the device key seed."""
    try:
        image = image_load(image_path)
    except ImageError as e:
        raise click.UsageError(f"{image_path}: {e}") from e
    for path in protected:
        if not path.startswith("/"):
            raise click.BadParameter(f"{path} is not absolute", param_hint="--protected")
    name = app or image_path.stem
    manifest = manifest_build(
        image, list(protected), app_key_for(keys, name), DeviceKeys.from_seed(keys), app_name=name
    )
    manifest.save(out)
    click.echo(f"{out}: {len(manifest.integrity_list.entries)} page hashes for {name}")


@main.command("verify-manifest")
@click.argument("manifest_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--keys", type=int, default=0, show_default=True, help="Device key seed.")
def verify_manifest(manifest_path: Path, keys: int) -> None:
    """Check a manifest's signature against the device derived from --keys."""
    raw = manifest_path.read_bytes()
    try:
        manifest = verify_manifest_bytes(raw, DeviceKeys.from_seed(keys).public)
    except (ManifestRejected, ValueError) as e:
        click.echo(f"{manifest_path}: REJECTED ({e})")
        sys.exit(1)
    click.echo(f"{manifest_path}: OK ({manifest.app_name})")


if __name__ == "__main__":
    main()

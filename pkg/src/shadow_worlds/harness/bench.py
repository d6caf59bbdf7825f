"""Counter-level cost of basic OS operations under the shielded stack.

Each row runs one small program with an honest OS and reads the costs the runtime
attached to the RESUME event of the operation of interest. The same program under the
reference kernel gives the number of plain kernel traps for the ratio column.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Literal

import pandas as pd
import yaml
from pydantic import BaseModel, Field

from shadow_worlds.common.trace import Trace
from shadow_worlds.common.utils import DATA_PATH, setup_logging
from shadow_worlds.harness.runner import run_reference, run_scenario
from shadow_worlds.harness.scenario import FileFixture, ProgramSpec, Scenario, resolve_source
from shadow_worlds.runtime.config import RuntimeConfig, load_config

setup_logging()
logger = logging.getLogger(__name__)

BENCH_DIR = DATA_PATH / "bench"
COST_FIELDS = ("switches", "zeroizations", "page_copies", "hash_ops", "unseals", "ae_ops", "copied")
_RUN_FIELDS = {
    "switches": "world_switches",
    "zeroizations": "zeroizations",
    "page_copies": "page_copies",
    "hash_ops": "hash_ops",
    "unseals": "unseals",
    "ae_ops": "ae_ops",
    "copied": "bytes_copied_cross_world",
}


class BenchRow(BaseModel):
    name: str
    source: str
    what: str
    page_kind: str | None = None
    measure: Literal["first", "sum", "run"] = "first"
    protected: list[str] = Field(default_factory=list)
    files: list[FileFixture] = Field(default_factory=list)


class BenchConfig(BaseModel):
    name: str
    seed: int = 0
    rows: list[BenchRow]


def load_bench_config(path: str | Path = BENCH_DIR / "micro.yml") -> BenchConfig:
    path = Path(path)
    if not path.exists() and (BENCH_DIR / path).exists():
        path = BENCH_DIR / path
    with open(path) as f:
        config_dict = yaml.safe_load(f)
    config = BenchConfig(**config_dict)
    base = path.parent
    rows = [r.model_copy(update={"source": resolve_source(r.source, base)}) for r in config.rows]
    return config.model_copy(update={"rows": rows})


def row_scenario(row: BenchRow, seed: int) -> Scenario:
    program = ProgramSpec(name="bench", text=row.source, protected=row.protected)
    return Scenario(name=row.name, seed=seed, programs=[program], files=row.files)


def resume_costs(trace: Trace, what: str, page_kind: str | None = None) -> list[dict[str, int]]:
    """Costs of every RESUME for `what`; with `page_kind`, only single faults of that kind.

    Assumes one HAP, so OS_PAGE events between an EXC and its RESUME belong to it.
    """
    out: list[dict[str, int]] = []
    kinds: list[str] = []
    for ev in trace.events:
        if ev.kind == "EXC":
            kinds = []
        elif ev.kind == "OS_PAGE":
            kinds.append(str(ev.get("kind")))
        elif ev.kind == "RESUME" and ev.get("what") == what:
            if page_kind is not None and kinds != [page_kind]:
                continue
            row = {f: int(ev.get(f, 0) or 0) for f in (*COST_FIELDS, "steps")}
            out.append(row)
    return out


def bench_row(
    row: BenchRow, seed: int = 0, config: RuntimeConfig | None = None
) -> dict[str, object]:
    config = config if config is not None else load_config()
    scenario = row_scenario(row, seed)
    shielded = run_scenario(scenario, config=config)
    reference = run_reference(scenario, config=config)
    if shielded.verdict.kind != "completes":
        raise RuntimeError(f"Bench row {row.name} did not complete: {shielded.verdict.describe()}")
    if shielded.outputs() != reference.outputs():
        raise RuntimeError(f"Bench row {row.name}: shielded and reference output differ")

    matches = resume_costs(shielded.machine.trace, row.what, row.page_kind)
    if row.measure == "run":
        metrics = shielded.machine.metrics.snapshot()
        costs = {f: metrics[_RUN_FIELDS[f]] for f in COST_FIELDS}
        costs["steps"] = shielded.steps
        traps = sum(reference.kernel_traps.values())
    elif not matches:
        raise RuntimeError(f"Bench row {row.name}: no {row.what} event in the trace")
    elif row.measure == "first":
        costs = matches[0]
        traps = 1 if reference.kernel_traps[row.what] else 0
    else:
        costs = {f: sum(m[f] for m in matches) for f in (*COST_FIELDS, "steps")}
        traps = reference.kernel_traps[row.what]

    ratio = costs["switches"] / traps if traps else math.nan
    logger.info(f"Bench {row.name}: {costs['switches']} switches over {traps} kernel traps")
    return {
        "operation": row.name,
        "what": row.what,
        "ops": len(matches),
        **costs,
        "reference_traps": traps,
        "switch_ratio": ratio,
    }


def bench(bench_config: BenchConfig, config: RuntimeConfig | None = None) -> pd.DataFrame:
    config = config if config is not None else load_config()
    seed = config.seed if config.seed is not None else bench_config.seed
    rows = [bench_row(r, seed, config) for r in bench_config.rows]
    return pd.DataFrame(rows)

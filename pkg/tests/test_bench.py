import pytest

from shadow_worlds.harness.bench import BenchConfig, BenchRow, bench_row, load_bench_config
from shadow_worlds.runtime.config import RuntimeConfig


@pytest.fixture(scope="module")
def micro() -> BenchConfig:
    return load_bench_config("micro.yml")


def _row(micro: BenchConfig, name: str) -> BenchRow:
    return next(r for r in micro.rows if r.name == name)


def test_null_syscall_costs_one_round_trip_each(micro: BenchConfig, config: RuntimeConfig) -> None:
    out = bench_row(_row(micro, "null syscall"), micro.seed, config)
    assert out["ops"] == 2
    assert out["switches"] == 4
    assert out["reference_traps"] == 2
    assert out["switch_ratio"] == 2.0


def test_anonymous_fault_zeroizes(micro: BenchConfig, config: RuntimeConfig) -> None:
    out = bench_row(_row(micro, "anonymous page fault"), micro.seed, config)
    assert out["ops"] == 2
    assert out["switches"] == 4
    assert out["zeroizations"] == 2
    assert out["page_copies"] == 0


def test_image_fault_copies_and_hashes(micro: BenchConfig, config: RuntimeConfig) -> None:
    out = bench_row(_row(micro, "image page fault"), micro.seed, config)
    assert out["ops"] == 2
    assert out["page_copies"] == 2
    assert out["hash_ops"] == 2
    assert out["copied"] >= 2 * 4096


def test_protected_read_unseals_once(micro: BenchConfig, config: RuntimeConfig) -> None:
    out = bench_row(_row(micro, "protected read"), micro.seed, config)
    assert out["switches"] == 2
    assert out["unseals"] == 1
    assert out["hash_ops"] == 1
    assert out["ae_ops"] == 1


def test_row_without_matching_event_is_an_error(micro: BenchConfig, config: RuntimeConfig) -> None:
    row = _row(micro, "null syscall").model_copy(update={"what": "futex"})
    with pytest.raises(RuntimeError, match="no futex event"):
        bench_row(row, micro.seed, config)


def test_fp_first_use_stays_in_the_secure_world(micro: BenchConfig, config: RuntimeConfig) -> None:
    out = bench_row(_row(micro, "fp first use"), micro.seed, config)
    assert out["ops"] == 1
    assert out["switches"] == 0
    assert out["reference_traps"] == 1
    assert out["switch_ratio"] == 0.0

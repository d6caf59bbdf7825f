import random

import pytest

from shadow_worlds.common.errors import BusFault, ConfigError, PermissionFault, SimulatorError
from shadow_worlds.common.trace import Trace
from shadow_worlds.common.utils import PAGE_SIZE
from shadow_worlds.machine.machine import Machine
from shadow_worlds.machine.models import (
    SECURE_ZONES,
    Zone,
    ZoneConfig,
    default_zone_config,
    parse_zone_text,
)

SMALL_ZONES = """
# normal world first, then the two secure regions
ZONE_NORMAL = 0x0, 4M
ZONE_TZ_RT  = 0x00400000, 1M
ZONE_TZ_APP = 0x00500000, 3M
"""


def _small() -> Machine:
    return Machine(parse_zone_text(SMALL_ZONES))


def test_create_zeroed_secure_unlocked() -> None:
    m = Machine()
    assert m.world == "secure"
    assert not m.config.locked
    assert m.phys_read(0x31000000, 64) == bytes(64)
    assert m.phys_read(0x1000, 16, "normal") == bytes(16)


def test_overlapping_zones_rejected() -> None:
    cfg = ZoneConfig(
        zones=[
            Zone(name="ZONE_NORMAL", base=0, length=0x200000),
            Zone(name="ZONE_TZ_RT", base=0x100000, length=0x100000),
            Zone(name="ZONE_TZ_APP", base=0x400000, length=0x100000),
        ]
    )
    with pytest.raises(ConfigError, match="overlap"):
        Machine(cfg)


def test_unaligned_zone_rejected() -> None:
    text = "ZONE_NORMAL = 0, 4097\nZONE_TZ_RT = 0x10000, 4K\nZONE_TZ_APP = 0x20000, 4K"
    with pytest.raises(ConfigError, match="page aligned"):
        Machine(parse_zone_text(text))


def test_page_size_must_be_power_of_two() -> None:
    with pytest.raises(ConfigError):
        Machine(page_size=3000)


def test_zone_text_errors_name_the_line() -> None:
    with pytest.raises(ConfigError, match="line 2"):
        parse_zone_text("ZONE_NORMAL = 0, 4M\nZONE_BOGUS = 0x400000, 1M\n")


def test_normal_world_reads_secure_as_zero() -> None:
    m = _small()
    m.phys_write(0x00500000, b"\xab" * 32, "secure")
    assert m.phys_read(0x00500000, 32, "secure") == b"\xab" * 32
    assert m.phys_read(0x00500000, 32, "normal") == bytes(32)


def test_normal_write_to_secure_is_dropped() -> None:
    m = _small()
    m.phys_write(0x00400010, b"runtime", "secure")
    m.phys_write(0x00400010, b"hostile", "normal")
    assert m.phys_read(0x00400010, 7, "secure") == b"runtime"


def test_secure_write_to_normal_is_visible() -> None:
    m = _small()
    m.phys_write(0x2000, b"shared", "secure")
    assert m.phys_read(0x2000, 6, "normal") == b"shared"


def test_unmapped_and_spanning_access_bus_fault() -> None:
    m = _small()
    with pytest.raises(BusFault):
        m.phys_read(0x01000000, 4)
    with pytest.raises(BusFault):
        m.phys_write(0x003FFFF0, bytes(32), "secure")
    assert [e.kind for e in m.trace.events] == ["BUS_FAULT", "BUS_FAULT"]


def test_zone_lock_is_monotonic() -> None:
    m = _small()
    m.zone_lock()
    m.zone_lock()
    assert m.config.locked
    with pytest.raises(PermissionFault):
        m.reconfigure(default_zone_config())
    # a fresh machine is the only way back
    assert not _small().config.locked


def test_zone_lock_from_normal_world_faults() -> None:
    m = _small()
    m.cross("normal", "test")
    with pytest.raises(PermissionFault):
        m.zone_lock()
    assert not m.config.locked
    assert m.trace.of_kind("PERM_FAULT")


def test_world_switch_goes_through_monitor() -> None:
    m = _small()
    with pytest.raises(SimulatorError):
        m.world_switch("normal", "svc")
    m.cross("normal", "svc")
    m.cross("secure", "return")
    switches = m.trace.of_kind("WORLD_SWITCH")
    assert [(e.get("src"), e.get("dst")) for e in switches] == [
        ("secure", "monitor"),
        ("monitor", "normal"),
        ("normal", "monitor"),
        ("monitor", "secure"),
    ]
    assert m.metrics.world_switches == 2


def test_monitor_round_trip_to_same_world_is_not_a_switch() -> None:
    m = _small()
    m.cross("secure", "noop")
    assert m.metrics.world_switches == 0


def test_zone_confidentiality_and_integrity_fuzz(rng: random.Random) -> None:
    m = _small()
    secure = [m.zone(name) for name in SECURE_ZONES]
    for zone in secure:
        for page in range(zone.base, zone.end, 64 * PAGE_SIZE):
            m.phys_write(page, bytes(rng.randrange(1, 256) for _ in range(PAGE_SIZE)), "secure")
    digests = {z.name: m.zone_digest(z.name) for z in secure}

    for _ in range(10_000):
        zone = rng.choice(secure)
        length = rng.randrange(1, 2 * PAGE_SIZE)
        addr = rng.randrange(zone.base, zone.end - length + 1)
        if rng.random() < 0.5:
            assert m.phys_read(addr, length, "normal") == bytes(length)
        else:
            m.phys_write(addr, b"\xee" * length, "normal")

    assert {z.name: m.zone_digest(z.name) for z in secure} == digests


def test_identical_operations_identical_traces() -> None:
    def script() -> str:
        m = _small()
        m.phys_write(0x1000, b"abc", "secure")
        m.cross("normal", "svc")
        m.phys_read(0x00500000, 8)
        m.cross("secure", "resume")
        m.zone_lock()
        return m.trace.text()

    assert script() == script()


def test_trace_fields_may_be_called_kind() -> None:
    trace = Trace()
    index = trace.append("EXC", kind="DataAbort", hap=1)
    (event,) = trace.of_kind("EXC")
    assert index == event.index == 0
    assert event.kind == "EXC"
    assert event.get("kind") == "DataAbort"
    assert "DataAbort" in trace.text()

import pytest
from pydantic import ValidationError

from shadow_worlds.common.errors import Violation
from shadow_worlds.common.utils import PAGE_SIZE
from shadow_worlds.machine.machine import Machine
from shadow_worlds.paging.faults import verify_fresh_zone_page
from shadow_worlds.paging.models import (
    FreshPageLedger,
    HashEntry,
    IntegrityList,
    PageEntry,
    TrustedPageTable,
)

APP_BASE = 0x31000000


def test_fresh_page_accepted_once() -> None:
    m, ledger = Machine(), FreshPageLedger()
    verify_fresh_zone_page(m, ledger, APP_BASE + 5 * PAGE_SIZE)
    assert APP_BASE + 5 * PAGE_SIZE in ledger
    with pytest.raises(Violation) as e:
        verify_fresh_zone_page(m, ledger, APP_BASE + 5 * PAGE_SIZE)
    assert e.value.reason == "NonFreshPage"


def test_released_page_is_fresh_again() -> None:
    m, ledger = Machine(), FreshPageLedger()
    verify_fresh_zone_page(m, ledger, APP_BASE)
    ledger.release(APP_BASE)
    verify_fresh_zone_page(m, ledger, APP_BASE)


@pytest.mark.parametrize(
    "page",
    [
        0x00100000,  # normal world
        0x30000000,  # runtime zone
        APP_BASE + 12,  # misaligned
        APP_BASE + 240 * 1024 * 1024,  # one past the end
    ],
)
def test_page_outside_app_zone_rejected(page: int) -> None:
    with pytest.raises(Violation) as e:
        verify_fresh_zone_page(Machine(), FreshPageLedger(), page)
    assert e.value.reason == "ZoneViolation"


def test_unchecked_mode_accepts_anything() -> None:
    ledger = FreshPageLedger()
    verify_fresh_zone_page(Machine(), ledger, 0x00100000, verify=False)
    verify_fresh_zone_page(Machine(), ledger, 0x00100000, verify=False)
    assert 0x00100000 in ledger


def test_page_table_is_page_granular() -> None:
    table = TrustedPageTable()
    entry = PageEntry(phys=APP_BASE, perms=frozenset("rw"), kind="anon")
    table.install(0x20010, entry)
    assert table.lookup(0x20FFF) is entry
    assert table.lookup(0x21000) is None
    assert entry.allows("w") and not entry.allows("x")
    table.install(0x22000, PageEntry(phys=APP_BASE + PAGE_SIZE, perms=frozenset("r"), kind="file"))
    assert table.in_range(0x20000, 0x3000) == [0x20000, 0x22000]
    assert table.remove(0x20abc) is entry
    assert table.lookup(0x20000) is None


def test_integrity_list_lookup() -> None:
    pages = (0x10000, 0x11000, 0x20000)
    entries = tuple(HashEntry(key=v, digest=bytes([i]) * 32) for i, v in enumerate(pages))
    ilist = IntegrityList(entries=entries)
    assert len(ilist) == 3
    assert ilist.lookup(0x11000) == b"\x01" * 32
    assert ilist.lookup(0x12000) is None
    assert ilist.lookup(0x11800) is None


def test_hash_entry_rejects_negative_keys() -> None:
    assert HashEntry(key=0, digest=bytes(32)).to_dict() == {"key": 0, "digest": "00" * 32}
    with pytest.raises(ValidationError):
        HashEntry(key=-PAGE_SIZE, digest=bytes(32))

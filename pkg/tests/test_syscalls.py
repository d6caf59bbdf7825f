import random
from types import SimpleNamespace
from typing import cast

import pytest

from shadow_worlds.common.errors import Violation
from shadow_worlds.common.layout import (
    EBADF,
    MAP_ANONYMOUS,
    MAP_FIXED,
    MAP_PRIVATE,
    PROT_READ,
    PROT_WRITE,
    SYS_BRK,
    SYS_GETPID,
    SYS_MMAP,
    SYS_READ,
)
from shadow_worlds.common.utils import PAGE_SIZE, page_ceil
from shadow_worlds.runtime.models import Hap
from shadow_worlds.syscalls.models import FutexMap, MarshaledCall
from shadow_worlds.syscalls.tracker import Mapping, MemoryMapTracker
from shadow_worlds.syscalls.verify import verify_response

FIXED = [(0x10000, 0x1000), (0x20000, 0x2000)]
HEAP_START = 0x30000
STACK_LOW = 0x100000
ANON = MAP_PRIVATE | MAP_ANONYMOUS
RW = PROT_READ | PROT_WRITE


def _tracker() -> MemoryMapTracker:
    return MemoryMapTracker(list(FIXED), HEAP_START, STACK_LOW)


def _hap(tracker: MemoryMapTracker) -> Hap:
    return cast(Hap, SimpleNamespace(tracker=tracker))


def _pages(start: int, length: int) -> set[int]:
    return set(range(start, start + page_ceil(length), PAGE_SIZE))


class PageSetOracle:
    """Brute-force page-set model of the address space."""

    def __init__(self) -> None:
        self.fixed = set().union(*(_pages(a, n) for a, n in FIXED))
        self.mapped: set[int] = set()
        self.brk = HEAP_START

    def heap(self) -> set[int]:
        return _pages(HEAP_START, self.brk - HEAP_START)

    def mmap(self, addr: int, length: int) -> bool:
        if length <= 0 or addr % PAGE_SIZE or addr < PAGE_SIZE:
            return False
        pages = _pages(addr, length)
        if addr + page_ceil(length) > STACK_LOW:
            return False
        if pages & (self.fixed | self.heap() | self.mapped):
            return False
        self.mapped |= pages
        return True

    def munmap(self, addr: int, length: int) -> None:
        self.mapped -= _pages(addr, length)

    def set_brk(self, new: int) -> bool:
        if new < HEAP_START or new >= STACK_LOW:
            return False
        grown = _pages(HEAP_START, new - HEAP_START) - self.heap()
        if grown & (self.fixed | self.mapped):
            return False
        self.brk = new
        return True


def test_tracker_matches_page_set_oracle(rng: random.Random) -> None:
    tracker, oracle = _tracker(), PageSetOracle()
    for _ in range(10_000):
        op = rng.random()
        if op < 0.5:
            addr = rng.randrange(0, 0x120) * PAGE_SIZE
            if rng.random() < 0.05:
                addr += rng.randrange(1, PAGE_SIZE)
            length = rng.randrange(0, 9) * PAGE_SIZE - rng.choice((0, 0, 100))
            ok = tracker.check_mmap(addr, length)
            assert ok == oracle.mmap(addr, length), (addr, length)
            if ok:
                tracker.add_mapping(Mapping(start=addr, length=length))
        elif op < 0.75:
            addr = rng.randrange(1, 0x120) * PAGE_SIZE
            length = rng.randrange(1, 9) * PAGE_SIZE
            tracker.remove(addr, length)
            oracle.munmap(addr, length)
        else:
            new = rng.randrange(HEAP_START - 2 * PAGE_SIZE, HEAP_START + 0x40 * PAGE_SIZE)
            ok = tracker.check_brk(new)
            assert ok == oracle.set_brk(new), (new, tracker.brk_limit)
            if ok:
                tracker.set_brk(new)

        mapped = set().union(*(_pages(m.start, m.length) for m in tracker.mappings))
        assert mapped == oracle.mapped
        assert tracker.brk_limit == oracle.brk


def test_partial_munmap_splits_and_keeps_offsets() -> None:
    tracker = _tracker()
    tracker.add_mapping(Mapping(start=0x40000, length=4 * PAGE_SIZE, kind="file", offset=0))
    removed = tracker.remove(0x41000, PAGE_SIZE)
    assert [(m.start, m.length, m.offset) for m in removed] == [(0x41000, PAGE_SIZE, PAGE_SIZE)]
    assert [(m.start, m.length, m.offset) for m in tracker.mappings] == [
        (0x40000, PAGE_SIZE, 0),
        (0x42000, 2 * PAGE_SIZE, 2 * PAGE_SIZE),
    ]
    assert tracker.region_of(0x42800) == tracker.mappings[1]
    assert tracker.region_of(0x41000) is None
    assert tracker.region_of(0x20000) == "segment"
    assert tracker.region_of(STACK_LOW) == "stack"


def _mmap(addr: int = 0, length: int = 2 * PAGE_SIZE, flags: int = ANON) -> MarshaledCall:
    args = (addr, length, RW, flags, 0xFFFFFFFF, 0)
    return MarshaledCall(SYS_MMAP, "mmap", guest_args=args, args=args)


def _read(count: int) -> MarshaledCall:
    return MarshaledCall(SYS_READ, "read", guest_args=(3, 0x20000, count), args=(3, 0x8000, count))


def test_oversize_read_is_a_bounds_violation() -> None:
    hap = _hap(_tracker())
    assert verify_response(hap, _read(16), 16).result == 16
    with pytest.raises(Violation) as e:
        verify_response(hap, _read(16), 17)
    assert e.value.reason == "BoundsViolation"


def test_errno_passes_through() -> None:
    hap = _hap(_tracker())
    assert verify_response(hap, _read(16), -EBADF & 0xFFFFFFFF).result == -EBADF


def test_unchecked_mode_accepts_oversize_read() -> None:
    hap = _hap(_tracker())
    assert verify_response(hap, _read(16), 4096, verify=False).result == 4096


def test_mmap_result_checked_against_address_space() -> None:
    tracker = _tracker()
    hap = _hap(tracker)
    with pytest.raises(Violation) as e:
        verify_response(hap, _mmap(), 0x20000)
    assert e.value.reason == "OverlapMapping"

    answer = verify_response(hap, _mmap(), 0x40000)
    assert answer.mapping is not None and answer.mapping.kind == "anon"
    assert tracker.find(0x41000) == answer.mapping

    with pytest.raises(Violation) as e:
        verify_response(hap, _mmap(), 0x41000)
    assert e.value.reason == "OverlapMapping"


def test_mmap_fixed_must_be_honoured() -> None:
    hap = _hap(_tracker())
    with pytest.raises(Violation) as e:
        verify_response(hap, _mmap(0x50000, flags=ANON | MAP_FIXED), 0x40000)
    assert e.value.reason == "BadResponse"


def test_brk_answers_checked() -> None:
    tracker = _tracker()
    hap = _hap(tracker)

    def brk(requested: int) -> MarshaledCall:
        return MarshaledCall(SYS_BRK, "brk", guest_args=(requested,), args=(requested,))

    assert verify_response(hap, brk(0), HEAP_START).result == HEAP_START
    assert verify_response(hap, brk(HEAP_START + 0x2000), HEAP_START + 0x2000).result
    assert tracker.brk_limit == HEAP_START + 0x2000

    with pytest.raises(Violation) as e:
        verify_response(hap, brk(0), 0x31000)
    assert e.value.reason == "OverlapMapping"
    with pytest.raises(Violation) as e:
        verify_response(hap, brk(STACK_LOW + PAGE_SIZE), STACK_LOW + PAGE_SIZE)
    assert e.value.reason == "OverlapMapping"
    with pytest.raises(Violation) as e:
        verify_response(hap, brk(HEAP_START + 0x8000), 0x12345000)
    assert e.value.reason == "BadResponse"


def test_getpid_must_be_positive() -> None:
    hap = _hap(_tracker())
    call = MarshaledCall(SYS_GETPID, "getpid", guest_args=(), args=())
    assert verify_response(hap, call, 100).result == 100
    with pytest.raises(Violation):
        verify_response(hap, call, 0)


def test_futex_map_registrations() -> None:
    futexes = FutexMap()
    futexes.register(0x1000, hap_id=1, vaddr=0x30000)
    futexes.register(0x1000, hap_id=2, vaddr=0x50000)
    futexes.register(0x2000, hap_id=1, vaddr=0x30004)
    assert futexes.waiting_on(0x1000) == [(2, 0x50000)]
    assert futexes.registrations(1) == 1
    futexes.unregister(2)
    assert futexes.waiting_on(0x1000) == []


def test_brk_shrink_reports_the_released_pages() -> None:
    tracker = _tracker()
    assert tracker.set_brk(HEAP_START + 3 * PAGE_SIZE + 8) is None
    released = tracker.set_brk(HEAP_START + PAGE_SIZE + 1)
    assert released == (HEAP_START + 2 * PAGE_SIZE, 2 * PAGE_SIZE)
    assert tracker.set_brk(HEAP_START) == (HEAP_START, 2 * PAGE_SIZE)
    assert tracker.set_brk(HEAP_START) is None

    hap = _hap(tracker)
    call = MarshaledCall(SYS_BRK, "brk", guest_args=(HEAP_START + 0x3000,), args=(0,))
    assert verify_response(hap, call, HEAP_START + 0x3000).released is None
    call = MarshaledCall(SYS_BRK, "brk", guest_args=(HEAP_START,), args=(0,))
    assert verify_response(hap, call, HEAP_START).released == (HEAP_START, 0x3000)


def test_map_fixed_replaces_an_earlier_mapping() -> None:
    tracker = _tracker()
    hap = _hap(tracker)
    verify_response(hap, _mmap(0x40000, 3 * PAGE_SIZE), 0x40000)
    answer = verify_response(hap, _mmap(0x41000, PAGE_SIZE, ANON | MAP_FIXED), 0x41000)
    assert answer.released == (0x41000, PAGE_SIZE)
    assert [(m.start, m.length) for m in tracker.mappings] == [
        (0x40000, PAGE_SIZE),
        (0x41000, PAGE_SIZE),
        (0x42000, PAGE_SIZE),
    ]
    assert tracker.find(0x41000) == answer.mapping


@pytest.mark.parametrize("addr", [0x20000, 0x10000, HEAP_START, STACK_LOW - PAGE_SIZE, 0])
def test_map_fixed_never_replaces_image_heap_or_stack(addr: int) -> None:
    tracker = _tracker()
    tracker.set_brk(HEAP_START + PAGE_SIZE)
    with pytest.raises(Violation) as e:
        verify_response(_hap(tracker), _mmap(addr, 2 * PAGE_SIZE, ANON | MAP_FIXED), addr)
    assert e.value.reason == "OverlapMapping"
    assert tracker.mappings == []


def test_layout_stack_starts_at_the_initial_sp() -> None:
    sp = 0x7FFF0FF0
    tracker = MemoryMapTracker.for_layout(list(FIXED), sp)
    assert tracker.stack_low == 0x7FFF0000
    assert tracker.heap_start == 0x22000
    assert tracker.region_of(sp) == "stack"
    assert tracker.region_of(0x7FFF0000 - PAGE_SIZE) is None
    assert tracker.check_mmap(0x7FFF0000 - PAGE_SIZE, PAGE_SIZE)
    assert not tracker.check_mmap(0x7FFF0000 - PAGE_SIZE, 2 * PAGE_SIZE)

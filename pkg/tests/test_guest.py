from pathlib import Path

import pytest

from shadow_worlds.common.errors import ImageError, ProgramError
from shadow_worlds.common.layout import CODE_BASE, DATA_BASE, INSN_SLOT, SYS_EXIT, SYS_FUTEX
from shadow_worlds.common.utils import PAGE_SIZE, page_floor
from shadow_worlds.guest.image import (
    assemble_file,
    build_image,
    image_load,
    image_save,
    segment_page,
    validate_image,
)
from shadow_worlds.guest.interpreter import GuestFault, GuestState, StepResult, step
from shadow_worlds.guest.models import (
    SEG_EXEC,
    SEG_READ,
    SEG_WRITE,
    GuestImage,
    Segment,
    StoreMem,
    Str,
)
from shadow_worlds.guest.parser import assemble, decode_slot, encode_slot, parse_string
from shadow_worlds.harness.scenario import PROGRAM_DIR
from shadow_worlds.machine.models import RegisterFile, TBytes
from shadow_worlds.runtime.models import Access


class DictMemory:
    """Flat page-granular guest memory; missing pages fault like an empty page table."""

    def __init__(self, image: GuestImage) -> None:
        self.pages: dict[int, bytearray] = {}
        self.perms: dict[int, str] = {}
        self.secret: list[tuple[int, int]] = []
        for seg in image.segments:
            for vaddr in range(seg.vaddr, seg.end, PAGE_SIZE):
                self.pages[vaddr] = bytearray(segment_page(seg, vaddr))
                self.perms[vaddr] = seg.perms()

    def map(self, vaddr: int, perms: str = "rw-") -> None:
        self.pages[vaddr] = bytearray(PAGE_SIZE)
        self.perms[vaddr] = perms

    def _page(self, vaddr: int, access: Access) -> bytearray:
        page = page_floor(vaddr)
        if page not in self.pages or access not in self.perms[page]:
            raise GuestFault(vaddr, access)
        return self.pages[page]

    def read(self, vaddr: int, length: int, access: Access) -> TBytes:
        out = bytearray()
        for i in range(length):
            out.append(self._page(vaddr + i, access)[(vaddr + i) % PAGE_SIZE])
        return TBytes.clean(bytes(out))

    def write(self, vaddr: int, data: TBytes) -> None:
        for i, byte in enumerate(data.data):
            self._page(vaddr + i, "w")[(vaddr + i) % PAGE_SIZE] = byte

    def mark_secret(self, vaddr: int, length: int) -> None:
        self.secret.append((vaddr, length))


def _boot(source: str) -> tuple[RegisterFile, GuestState, DictMemory]:
    image = build_image(assemble(source))
    regs = RegisterFile(pc=image.entry)
    return regs, GuestState(), DictMemory(image)


def _run_to_syscall(regs: RegisterFile, state: GuestState, mem: DictMemory) -> StepResult:
    for _ in range(10_000):
        result = step(regs, state, mem, hap_id=1)
        if result.kind != "ok":
            return result
    raise AssertionError("program did not trap")


def test_assemble_places_code_and_rodata() -> None:
    program = assemble('sys open "/data/x" O_RDONLY\nexit 0\n')
    image = build_image(program)
    code, rodata = image.segments
    assert image.entry == CODE_BASE
    assert code.flags == SEG_READ | SEG_EXEC
    assert code.content[:INSN_SLOT].rstrip(b"\0").startswith(b"sys 5 ")
    assert rodata.vaddr == DATA_BASE
    assert rodata.content.startswith(b"/data/x\0")


def test_entry_label_and_bss() -> None:
    image = build_image(assemble(".entry main\n.bss 0x30000 8192\nhelper:\n ret\nmain:\n exit 0\n"))
    assert image.entry == CODE_BASE + INSN_SLOT
    bss = image.segment_at(0x30000)
    assert bss is not None and bss.length == 2 * PAGE_SIZE
    assert bss.flags & SEG_WRITE


@pytest.mark.parametrize(
    "source, message",
    [
        ("", "no instructions"),
        ("bogus r1\n", "Unknown instruction"),
        ("mov r13 1\n", "r0..r12"),
        ("jmp nowhere\n", "Cannot resolve"),
        (".entry missing\nexit 0\n", "Unknown entry label"),
        ('emit "\\q"\n', "Unknown escape"),
    ],
)
def test_assembler_rejects(source: str, message: str) -> None:
    with pytest.raises(ProgramError, match=message):
        assemble(source)


def test_string_literals() -> None:
    assert parse_string('"a\\n\\x41\\0"') == b"a\nA\0"
    assert parse_string('x"00ff"') == b"\x00\xff"
    assert parse_string("r1") is None


def test_slot_is_canonical_and_bounded() -> None:
    program = assemble('store 0x20000 "four"\nemit r3\nfp add d1 d2 1.5\nexit 0\n')
    for op in program.instructions:
        raw = encode_slot(op)
        assert len(raw) == INSN_SLOT
        assert decode_slot(raw) == op
    with pytest.raises(ProgramError, match="slot"):
        encode_slot(assemble(f'emit "{"y" * 100}"\n').instructions[0])


def test_image_validation() -> None:
    code = Segment(CODE_BASE, PAGE_SIZE, SEG_READ | SEG_EXEC, "code", b"exit")
    with pytest.raises(ImageError, match="no segments"):
        validate_image(GuestImage(entry=CODE_BASE, segments=()))
    high = Segment(0x7FFFF000, 2 * PAGE_SIZE, SEG_READ, "data", b"")
    with pytest.raises(ImageError, match="kernel half"):
        validate_image(GuestImage(entry=CODE_BASE, segments=(code, high)))
    overlap = Segment(CODE_BASE, PAGE_SIZE, SEG_READ, "data", b"")
    with pytest.raises(ImageError, match="overlap"):
        validate_image(GuestImage(entry=CODE_BASE, segments=(code, overlap)))
    ragged = Segment(0x30000, 100, SEG_READ, "data", b"")
    with pytest.raises(ImageError, match="page aligned"):
        validate_image(GuestImage(entry=CODE_BASE, segments=(code, ragged)))
    with pytest.raises(ImageError, match="executable"):
        validate_image(GuestImage(entry=0x30000, segments=(code,)))


def test_image_file_survives_save_and_load(tmp_path: Path) -> None:
    image = assemble_file(PROGRAM_DIR / "file_io.hasm")
    path = image_save(image, tmp_path / "bin" / "file_io.hapi")
    assert image_load(path) == image


def test_image_load_rejects_garbage(tmp_path: Path) -> None:
    path = tmp_path / "junk.hapi"
    path.write_bytes(b"HAPI\x01\x00")
    with pytest.raises(ImageError):
        image_load(path)


def test_counter_loop_runs_to_exit() -> None:
    regs, state, mem = _boot((PROGRAM_DIR / "counter_loop.hasm").read_text())
    result = _run_to_syscall(regs, state, mem)
    assert result.kind == "exception" and result.record is not None
    assert result.record.syscall_number == SYS_EXIT
    assert result.record.args[0] == 0
    assert bytes(state.output) == b"2^5 = 32\n"


def test_missing_page_is_an_abort_and_retries() -> None:
    regs, state, mem = _boot("load 0x30000 4\nemit acc\nexit 0\n")
    result = step(regs, state, mem, 1)
    assert result.kind == "exception" and result.record is not None
    assert result.record.kind == "DataAbort"
    assert result.record.faulting_vaddr == 0x30000
    assert regs.pc == CODE_BASE
    mem.map(0x30000)
    mem.write(0x30000, TBytes.clean(b"ok!\n"))
    _run_to_syscall(regs, state, mem)
    assert bytes(state.output) == b"ok!\n"


def test_fetch_from_unmapped_code_is_prefetch_abort() -> None:
    regs, state, mem = _boot("jmp 0x50000\n")
    assert step(regs, state, mem, 1).kind == "ok"
    result = step(regs, state, mem, 1)
    assert result.record is not None and result.record.kind == "PrefetchAbort"
    assert result.record.access == "x"


def test_kernel_half_access_is_fatal() -> None:
    regs, state, mem = _boot("load 0x80001000 4\nexit 0\n")
    result = step(regs, state, mem, 1)
    assert result.kind == "fatal" and result.reason == "KernelAccess"


def test_fp_traps_until_enabled() -> None:
    regs, state, mem = _boot("fp set d0 2.5\nfp mul d1 d0 4\nemit d1\nexit 0\n")
    result = step(regs, state, mem, 1)
    assert result.record is not None and result.record.kind == "Undefined"
    assert regs.pc == CODE_BASE
    regs.fp_enabled = True
    _run_to_syscall(regs, state, mem)
    assert bytes(state.output) == b"10.000000"


def test_futex_wait_traps_only_on_matching_value() -> None:
    regs, state, mem = _boot("futex_wait 0x30000 0\nfutex_wait 0x30000 1\nexit 0\n")
    mem.map(0x30000)
    first = step(regs, state, mem, 1)
    assert first.record is not None and first.record.syscall_number == SYS_FUTEX
    # the wait re-executes after the kernel answers
    assert regs.pc == CODE_BASE
    regs.pc += INSN_SLOT
    assert step(regs, state, mem, 1).kind == "ok"


def test_mark_secret_reaches_memory_backend() -> None:
    regs, state, mem = _boot("store 0x30000 \"hidden!!\"\nsecret 0x30000 8\nexit 0\n")
    mem.map(0x30000)
    _run_to_syscall(regs, state, mem)
    assert mem.secret == [(0x30000, 8)]


def test_store_literal_is_clean_data() -> None:
    program = assemble('store 0x20000 "abc"\nexit 0\n')
    op = program.instructions[0]
    assert isinstance(op, StoreMem)
    assert op.value == Str(b"abc")

"""Assembler for guest program text and decoder for in-memory instruction slots.

Grammar (one statement per line, `#` comments, commas optional):

    label:
    .code <vaddr>                .entry <label>
    .data <vaddr> <"str"|x"hex">  .bss <vaddr> <len>      .lib <path>
    load <addr> <len>            ldr rD <addr>            store <addr> <"str"|x"hex"|acc|rN>
    mov rD <v>   add rD <v>      sub rD <v>
    jmp <label>  jz rN <label>   jnz rN <label>           call <label>     ret
    sys <name|num> <v>...        exit <v>
    fp <set|add|sub|mul|div> dD <dA|float> [dB|float]
    signal <SIG> <label>         raise <SIG> [pid]
    futex_wait <addr> <v>        futex_wake <addr>
    emit <"str"|x"hex"|acc|rN|dN>
    secret <addr> <len>

`<addr>` is an integer, label, `rN` or `rN+off`; `<v>` is an integer, named constant
(`O_CREAT|O_RDWR`), label, `rN` or, for `sys`, a string placed in read-only data.
"""

from __future__ import annotations

import re
from collections.abc import Callable
from functools import lru_cache

from shadow_worlds.common.errors import ProgramError
from shadow_worlds.common.layout import (
    CODE_BASE,
    DATA_BASE,
    INSN_SLOT,
    NAMED_CONSTANTS,
    PRETCODE,
    SIGNALS,
    SYS_EXIT,
    SYSCALL_NUMBERS,
)
from shadow_worlds.common.utils import page_ceil
from shadow_worlds.guest.models import (
    Acc,
    Addr,
    Arith,
    Call,
    Emit,
    FImm,
    FpOp,
    FpOpStr,
    FReg,
    FutexWait,
    FutexWake,
    GuestOp,
    GuestProgram,
    Imm,
    Jump,
    LoadMem,
    LoadWord,
    MarkSecret,
    Mov,
    Raise,
    Reg,
    RegisterSignal,
    RegOff,
    Ret,
    SegmentKind,
    SigReturnStub,
    StoreMem,
    Str,
    Syscall,
    Value,
)

TOKEN_RE = re.compile(r'x"[0-9a-fA-F]*"|"(?:[^"\\]|\\.)*"|[^\s,]+')
REG_RE = re.compile(r"^r(\d{1,2})$")
REGOFF_RE = re.compile(r"^r(\d{1,2})\+(\S+)$")
FREG_RE = re.compile(r"^d(\d{1,2})$")
LABEL_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")

_ESCAPES = {"n": b"\n", "t": b"\t", "0": b"\0", "\\": b"\\", '"': b'"'}

# Resolves a symbolic token (label or string) to an address; None if unknown.
Resolver = Callable[[str], int | None]


def tokenize(line: str) -> list[str]:
    line = line.split("#", 1)[0] if '"' not in line else _strip_comment(line)
    return TOKEN_RE.findall(line)


def _strip_comment(line: str) -> str:
    in_str = False
    for i, ch in enumerate(line):
        if ch == '"' and (i == 0 or line[i - 1] != "\\"):
            in_str = not in_str
        elif ch == "#" and not in_str:
            return line[:i]
    return line


def parse_string(tok: str) -> bytes | None:
    if tok.startswith('x"') and tok.endswith('"'):
        return bytes.fromhex(tok[2:-1])
    if not (len(tok) >= 2 and tok.startswith('"') and tok.endswith('"')):
        return None
    body = tok[1:-1]
    out = bytearray()
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            nxt = body[i + 1]
            if nxt == "x":
                out += bytes([int(body[i + 2 : i + 4], 16)])
                i += 4
                continue
            if nxt not in _ESCAPES:
                raise ProgramError(f"Unknown escape \\{nxt} in {tok}")
            out += _ESCAPES[nxt]
            i += 2
            continue
        out += ch.encode("utf-8")
        i += 1
    return bytes(out)


def _reg(tok: str) -> Reg:
    m = REG_RE.match(tok)
    if not m or int(m.group(1)) > 12:
        raise ProgramError(f"Expected register r0..r12, got {tok!r}")
    return Reg(int(m.group(1)))


def _freg(tok: str) -> FReg:
    m = FREG_RE.match(tok)
    if not m or int(m.group(1)) > 31:
        raise ProgramError(f"Expected fp register d0..d31, got {tok!r}")
    return FReg(int(m.group(1)))


def _int(tok: str, resolve: Resolver | None) -> int:
    parts = tok.split("|")
    if len(parts) > 1:
        value = 0
        for p in parts:
            value |= _int(p, resolve)
        return value
    if tok in NAMED_CONSTANTS:
        return NAMED_CONSTANTS[tok]
    try:
        return int(tok, 0)
    except ValueError:
        pass
    if resolve is not None:
        resolved = resolve(tok)
        if resolved is not None:
            return resolved
    raise ProgramError(f"Cannot resolve {tok!r}")


def _value(tok: str, resolve: Resolver | None) -> Value:
    if REG_RE.match(tok):
        return _reg(tok)
    return Imm(_int(tok, resolve))


def _addr(tok: str, resolve: Resolver | None) -> Addr:
    m = REGOFF_RE.match(tok)
    if m:
        return RegOff(_reg(f"r{m.group(1)}").index, _int(m.group(2), resolve))
    return _value(tok, resolve)


def _fp_operand(tok: str) -> FReg | FImm:
    if FREG_RE.match(tok):
        return _freg(tok)
    try:
        return FImm(float(tok))
    except ValueError as e:
        raise ProgramError(f"Expected fp register or float, got {tok!r}") from e


def _signum(tok: str) -> int:
    if tok in SIGNALS:
        return SIGNALS[tok]
    try:
        return int(tok, 0)
    except ValueError as e:
        raise ProgramError(f"Unknown signal {tok!r}") from e


def _arity(toks: list[str], lo: int, hi: int | None = None) -> None:
    hi = lo if hi is None else hi
    if not lo <= len(toks) - 1 <= hi:
        raise ProgramError(f"'{' '.join(toks)}': expected {lo}..{hi} operands")


def parse_instruction(toks: list[str], resolve: Resolver | None = None) -> GuestOp:
    op = toks[0]
    try:
        if op == "load":
            _arity(toks, 2)
            return LoadMem(_addr(toks[1], resolve), _value(toks[2], resolve))
        if op == "ldr":
            _arity(toks, 2)
            return LoadWord(_reg(toks[1]), _addr(toks[2], resolve))
        if op == "store":
            _arity(toks, 2)
            return StoreMem(_addr(toks[1], resolve), parse_store_value(toks[2]))
        if op in ("mov", "add", "sub"):
            _arity(toks, 2)
            dst, src = _reg(toks[1]), _value(toks[2], resolve)
            return Mov(dst, src) if op == "mov" else Arith(op, dst, src)  # type: ignore[arg-type]
        if op == "jmp":
            _arity(toks, 1)
            return Jump("always", _int(toks[1], resolve))
        if op in ("jz", "jnz"):
            _arity(toks, 2)
            return Jump(op[1:], _int(toks[2], resolve), _reg(toks[1]))  # type: ignore[arg-type]
        if op == "call":
            _arity(toks, 1)
            return Call(_int(toks[1], resolve))
        if op == "ret":
            _arity(toks, 0)
            return Ret()
        if op == "sys":
            _arity(toks, 1, 8)
            number = SYSCALL_NUMBERS.get(toks[1])
            if number is None:
                number = _int(toks[1], None)
            return Syscall(number, tuple(_value(t, resolve) for t in toks[2:]))
        if op == "exit":
            _arity(toks, 1)
            return Syscall(SYS_EXIT, (_value(toks[1], resolve),))
        if op == "fp":
            _arity(toks, 3, 4)
            if toks[1] not in FpOpStr:
                raise ProgramError(f"Unknown fp op {toks[1]!r}")
            b = _fp_operand(toks[4]) if len(toks) == 5 else None
            return FpOp(toks[1], _freg(toks[2]), _fp_operand(toks[3]), b)  # type: ignore[arg-type]
        if op == "signal":
            _arity(toks, 2)
            return RegisterSignal(_signum(toks[1]), _int(toks[2], resolve))
        if op == "raise":
            _arity(toks, 1, 2)
            pid = _value(toks[2], resolve) if len(toks) == 3 else None
            return Raise(_signum(toks[1]), pid)
        if op == "futex_wait":
            _arity(toks, 2)
            return FutexWait(_addr(toks[1], resolve), _value(toks[2], resolve))
        if op == "futex_wake":
            _arity(toks, 1)
            return FutexWake(_addr(toks[1], resolve))
        if op == "emit":
            _arity(toks, 1)
            return Emit(parse_emit_value(toks[1]))
        if op == "secret":
            _arity(toks, 2)
            return MarkSecret(_addr(toks[1], resolve), _int(toks[2], resolve))
    except (ValueError, IndexError) as e:
        raise ProgramError(f"Error parsing '{' '.join(toks)}': {e}") from e
    raise ProgramError(f"Unknown instruction {op!r}")


def parse_store_value(tok: str) -> Str | Acc | Reg:
    if tok == "acc":
        return Acc()
    data = parse_string(tok)
    if data is not None:
        return Str(data)
    return _reg(tok)


def parse_emit_value(tok: str) -> Str | Acc | Reg | FReg:
    if FREG_RE.match(tok):
        return _freg(tok)
    return parse_store_value(tok)


# --- canonical form ------------------------------------------------------------


def _r_addr(a: Addr) -> str:
    if isinstance(a, RegOff):
        return f"r{a.index}+{a.offset:#x}"
    return _r_value(a)


def _r_value(v: Value) -> str:
    return f"r{v.index}" if isinstance(v, Reg) else f"{v.value:#x}"


def _r_data(v: Str | Acc | Reg | FReg) -> str:
    if isinstance(v, Str):
        return f'x"{v.data.hex()}"'
    if isinstance(v, Acc):
        return "acc"
    if isinstance(v, FReg):
        return f"d{v.index}"
    return f"r{v.index}"


def _r_fp(v: FReg | FImm) -> str:
    return f"d{v.index}" if isinstance(v, FReg) else repr(v.value)


def render(op: GuestOp) -> str:
    """Canonical single-line text of an instruction; parses back to the same op."""
    match op:
        case LoadMem(addr, length):
            return f"load {_r_addr(addr)} {_r_value(length)}"
        case LoadWord(dst, addr):
            return f"ldr r{dst.index} {_r_addr(addr)}"
        case StoreMem(addr, value):
            return f"store {_r_addr(addr)} {_r_data(value)}"
        case Mov(dst, src):
            return f"mov r{dst.index} {_r_value(src)}"
        case Arith(name, dst, src):
            return f"{name} r{dst.index} {_r_value(src)}"
        case Jump("always", target, _):
            return f"jmp {target:#x}"
        case Jump(cond, target, reg):
            assert reg is not None
            return f"j{cond} r{reg.index} {target:#x}"
        case Call(target):
            return f"call {target:#x}"
        case Ret():
            return "ret"
        case Syscall(number, args):
            return " ".join(["sys", str(number), *(_r_value(a) for a in args)])
        case FpOp(name, dst, a, b):
            tail = f" {_r_fp(b)}" if b is not None else ""
            return f"fp {name} d{dst.index} {_r_fp(a)}{tail}"
        case RegisterSignal(signum, handler):
            return f"signal {signum} {handler:#x}"
        case Raise(signum, pid):
            return f"raise {signum}" + (f" {_r_value(pid)}" if pid is not None else "")
        case FutexWait(addr, expected):
            return f"futex_wait {_r_addr(addr)} {_r_value(expected)}"
        case FutexWake(addr):
            return f"futex_wake {_r_addr(addr)}"
        case Emit(value):
            return f"emit {_r_data(value)}"
        case MarkSecret(addr, length):
            return f"secret {_r_addr(addr)} {length:#x}"
    raise ProgramError(f"Cannot render {op!r}")


def encode_slot(op: GuestOp) -> bytes:
    text = render(op).encode("ascii")
    if len(text) >= INSN_SLOT:
        raise ProgramError(f"Instruction too long for a {INSN_SLOT}-byte slot: {text[:40]!r}...")
    return text.ljust(INSN_SLOT, b"\0")


@lru_cache(maxsize=4096)
def decode_slot(raw: bytes) -> GuestOp:
    if raw.startswith(PRETCODE):
        return SigReturnStub()
    text = raw.split(b"\0", 1)[0]
    try:
        toks = tokenize(text.decode("ascii"))
    except UnicodeDecodeError as e:
        raise ProgramError(f"Undecodable instruction bytes {raw[:16].hex()}") from e
    if not toks:
        raise ProgramError(f"Empty instruction slot {raw[:16].hex()}")
    return parse_instruction(toks)


# --- assembler -----------------------------------------------------------------


def assemble(source: str) -> GuestProgram:
    code_base = CODE_BASE
    lines: list[list[str]] = []
    labels: dict[str, int] = {}
    data: list[tuple[int, bytes, SegmentKind]] = []
    libraries: list[str] = []
    entry_label: str | None = None

    # pass 1: directives and label addresses
    for lineno, raw in enumerate(source.splitlines(), start=1):
        toks = tokenize(raw)
        if not toks:
            continue
        try:
            if toks[0] == ".code":
                if lines:
                    raise ProgramError(".code must precede instructions")
                code_base = int(toks[1], 0)
            elif toks[0] == ".data":
                blob = parse_string(toks[2])
                if blob is None:
                    raise ProgramError(f"Expected string literal, got {toks[2]!r}")
                data.append((int(toks[1], 0), blob, "data"))
            elif toks[0] == ".bss":
                data.append((int(toks[1], 0), bytes(int(toks[2], 0)), "data"))
            elif toks[0] == ".lib":
                libraries.append(toks[1])
            elif toks[0] == ".entry":
                entry_label = toks[1]
            elif toks[0].endswith(":") and LABEL_RE.match(toks[0][:-1]):
                labels[toks[0][:-1]] = len(lines)
                if len(toks) > 1:
                    lines.append(toks[1:])
            else:
                lines.append(toks)
        except (IndexError, ValueError) as e:
            raise ProgramError(f"line {lineno}: {e}") from e

    if not lines:
        raise ProgramError("Program has no instructions")

    addr_of = {name: code_base + idx * INSN_SLOT for name, idx in labels.items()}

    data_end = max((v + len(b) for v, b, _ in data), default=DATA_BASE)
    rodata_base = page_ceil(max(data_end, DATA_BASE))
    rodata = bytearray()
    interned: dict[bytes, int] = {}

    def resolve(tok: str) -> int | None:
        if tok in addr_of:
            return addr_of[tok]
        blob = parse_string(tok)
        if blob is None:
            return None
        if blob not in interned:
            interned[blob] = rodata_base + len(rodata)
            rodata.extend(blob + b"\0")
        return interned[blob]

    instructions = [parse_instruction(toks, resolve) for toks in lines]
    if rodata:
        data.append((rodata_base, bytes(rodata), "data"))

    entry = code_base
    if entry_label is not None:
        if entry_label not in addr_of:
            raise ProgramError(f"Unknown entry label {entry_label!r}")
        entry = addr_of[entry_label]

    return GuestProgram(
        instructions=instructions,
        code_base=code_base,
        labels=addr_of,
        data=data,
        libraries=libraries,
        entry=entry,
    )

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Any

FieldValue = int | str | bool

ADDRESS_FIELDS = frozenset(
    {"addr", "vaddr", "phys", "s_page", "n_page", "base", "pc", "handler", "vector", "result_addr"}
)


@dataclass(frozen=True)
class TraceEvent:
    index: int
    kind: str
    fields: tuple[tuple[str, FieldValue], ...]

    def get(self, key: str, default: FieldValue | None = None) -> FieldValue | None:
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def render(self) -> str:
        parts = [f"{self.index:06d}", self.kind]
        for k, v in self.fields:
            if isinstance(v, bool):
                parts.append(f"{k}={int(v)}")
            elif isinstance(v, int) and k in ADDRESS_FIELDS:
                parts.append(f"{k}={v:#010x}")
            else:
                parts.append(f"{k}={v}")
        return " ".join(parts)


@dataclass
class Metrics:
    world_switches: int = 0
    bytes_copied_cross_world: int = 0
    hash_ops: int = 0
    ae_ops: int = 0
    zeroizations: int = 0
    page_copies: int = 0
    unseals: int = 0
    syscall_latency: dict[str, list[int]] = field(default_factory=dict)

    def snapshot(self) -> dict[str, int]:
        d = asdict(self)
        d.pop("syscall_latency")
        return d

    def delta(self, before: dict[str, int]) -> dict[str, int]:
        now = self.snapshot()
        return {k: now[k] - before[k] for k in now}

    def record_latency(self, name: str, steps: int) -> None:
        self.syscall_latency.setdefault(name, []).append(steps)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class Trace:
    def __init__(self) -> None:
        self.events: list[TraceEvent] = []

    def __len__(self) -> int:
        return len(self.events)

    def append(self, kind: str, /, **fields: FieldValue) -> int:
        index = len(self.events)
        self.events.append(TraceEvent(index=index, kind=kind, fields=tuple(fields.items())))
        return index

    def of_kind(self, kind: str) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == kind]

    def lines(self) -> list[str]:
        return [e.render() for e in self.events]

    def text(self) -> str:
        return "\n".join(self.lines()) + ("\n" if self.events else "")

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode("utf-8")).hexdigest()

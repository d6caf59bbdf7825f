from typing import Any, Literal

from pydantic import BaseModel, Field

VerdictKind = Literal["completes", "hap_killed", "boot_halt", "blocked", "step_limit"]
AttackOutcome = Literal[
    "killed", "boot_halt", "no_effect", "corrupted", "leaked", "crash", "timeout", "blocked"
]
CONTAINED: frozenset[str] = frozenset({"killed", "boot_halt", "no_effect"})


class Verdict(BaseModel):
    kind: VerdictKind
    digest: str | None = None
    reason: str | None = None
    index: int | None = None
    hap: int | None = None
    boot_step: int | None = None

    def describe(self) -> str:
        if self.kind == "completes":
            return f"completes digest={self.digest}"
        if self.kind == "hap_killed":
            return f"hap_killed reason={self.reason} at={self.index} hap={self.hap}"
        if self.kind == "boot_halt":
            return f"boot_halt step={self.boot_step}"
        return self.kind


class Expectation(BaseModel):
    kind: VerdictKind
    reason: str | None = None
    digest: str | None = None

    def matches(self, verdict: Verdict) -> bool:
        if verdict.kind != self.kind:
            return False
        if self.reason is not None and verdict.reason != self.reason:
            return False
        return self.digest is None or verdict.digest == self.digest


class HapReport(BaseModel):
    hap_id: int
    pid: int
    app: str
    state: str
    exit_code: int | None = None
    kill_reason: str | None = None
    output: str = ""
    console: str = ""


class LeakReport(BaseModel):
    labelled_bytes: int = 0
    content_hits: int = 0
    pages: list[int] = Field(default_factory=list)

    @property
    def leaked(self) -> bool:
        return self.labelled_bytes > 0 or self.content_hits > 0


class RunResult(BaseModel):
    ok: bool
    scenario: str
    verdict: Verdict
    expected: Expectation | None = None
    haps: list[HapReport] = Field(default_factory=list)
    leaks: LeakReport = Field(default_factory=LeakReport)
    metrics: dict[str, Any] = Field(default_factory=dict)
    trace_digest: str = ""
    steps: int = 0
    error: str | None = None


class AttackResult(BaseModel):
    fault: str
    outcome: AttackOutcome
    contained: bool
    verdict: str
    reason: str | None = None
    leaked_bytes: int = 0
    applied: int = 0
    detail: str = ""

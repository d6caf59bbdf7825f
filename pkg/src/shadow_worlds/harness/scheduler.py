from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

from shadow_worlds.common.utils import setup_logging
from shadow_worlds.runtime.runtime import Runtime

setup_logging()
logger = logging.getLogger(__name__)

StopReason = Literal["idle", "blocked", "step_limit"]


@dataclass(frozen=True)
class ScheduleResult:
    stop: StopReason
    steps: int


class RoundRobin:
    """Steps runnable HAPs one instruction at a time in hap-id order."""

    def __init__(self, runtime: Runtime, max_steps: int) -> None:
        self.runtime = runtime
        self.max_steps = max_steps
        self.steps = 0
        self._last = 0

    def _next(self) -> int | None:
        ready = self.runtime.runnable()
        if not ready:
            return None
        later = [h for h in ready if h > self._last]
        self._last = later[0] if later else ready[0]
        return self._last

    def run(self) -> ScheduleResult:
        machine = self.runtime.machine
        machine.cross("secure", "schedule")
        try:
            while self.steps < self.max_steps:
                hap_id = self._next()
                if hap_id is None:
                    break
                self.runtime.step(hap_id)
                self.steps += 1
        finally:
            self.runtime.vacate()
            machine.cross("normal", "idle")
        if self.steps >= self.max_steps and self.runtime.runnable():
            logger.warning(f"Step budget of {self.max_steps} exhausted")
            return ScheduleResult("step_limit", self.steps)
        if any(h.state == "blocked" for h in self.runtime.haps.values()):
            return ScheduleResult("blocked", self.steps)
        return ScheduleResult("idle", self.steps)

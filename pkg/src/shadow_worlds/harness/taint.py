"""Leak detection over everything the normal world can see.

Two independent signals: per-byte SECRET labels that reached normal-world-readable bytes,
and verbatim occurrences of known secret material (keys, MarkSecret ranges) in those bytes.
Bytes the runtime staged into the marshal buffer carry DISCLOSED instead of SECRET and are
never counted.
"""

from __future__ import annotations

import logging
from typing import Final

from shadow_worlds.common.utils import PAGE_SIZE, setup_logging
from shadow_worlds.harness.models import LeakReport
from shadow_worlds.machine.machine import Machine
from shadow_worlds.machine.models import LABEL_DISCLOSED, LABEL_SECRET, TBytes

setup_logging()
logger = logging.getLogger(__name__)

WINDOW: Final = 16
MIN_SECRET: Final = 8


def _windows(secret: bytes) -> list[bytes]:
    if len(secret) < MIN_SECRET:
        return []
    if len(secret) <= WINDOW:
        out = [secret]
    else:
        starts = list(range(0, len(secret) - WINDOW + 1, WINDOW // 2))
        if starts[-1] != len(secret) - WINDOW:
            starts.append(len(secret) - WINDOW)
        out = [secret[i : i + WINDOW] for i in starts]
    # runs of one byte value (zero padding) say nothing about a leak
    return [w for w in out if len(set(w)) > 1]


class TaintTracker:
    def __init__(self) -> None:
        self.observed: list[TBytes] = []

    def observe(self, data: TBytes) -> None:
        """Sink for OS scrapes and anything else the adversary read."""
        self.observed.append(data)

    def haystacks(self, machine: Machine) -> list[tuple[int | None, TBytes]]:
        out: list[tuple[int | None, TBytes]] = []
        for page in machine.touched_pages("ZONE_NORMAL"):
            out.append((page, machine.phys_read_t(page, PAGE_SIZE, "normal")))
        out += [(None, t) for t in self.observed]
        return out

    def scan(self, machine: Machine, secrets: list[bytes]) -> LeakReport:
        report = LeakReport()
        windows = {w for s in secrets for w in _windows(s)}
        leaky_pages: set[int] = set()
        for page, blob in self.haystacks(machine):
            labelled = blob.labels.count(LABEL_SECRET)
            if labelled:
                report.labelled_bytes += labelled
                if page is not None:
                    leaky_pages.add(page)
            if not any(blob.data):
                continue
            for w in windows:
                pos = blob.data.find(w)
                while pos >= 0:
                    if LABEL_DISCLOSED not in blob.labels[pos : pos + len(w)]:
                        report.content_hits += 1
                        if page is not None:
                            leaky_pages.add(page)
                    pos = blob.data.find(w, pos + 1)
        report.pages = sorted(leaky_pages)
        if report.leaked:
            logger.warning(
                f"Leak scan: {report.labelled_bytes} labelled bytes, "
                f"{report.content_hits} content hits on {len(report.pages)} pages"
            )
        return report

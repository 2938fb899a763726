"""Wall-clock and memory accounting for one pipeline run."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

DEFAULT_MULTIPLIER = 3.0


class BudgetExhausted(RuntimeError):
    pass


@dataclass
class PhaseRecord:
    name: str
    start_s: float
    end_s: float | None = None
    est_peak_bytes: int = 0


@dataclass
class BudgetTracker:
    """Serializes every time query and phase transition of a run.

    ``clock`` returns seconds; ``start`` defaults to the clock reading at
    construction, but callers may pass an earlier instant (e.g. process start).
    """

    time_budget_s: float
    mem_budget_bytes: int = 16 * 1024 ** 3
    clock: Callable[[], float] = time.monotonic
    start: float | None = None
    phases: list[PhaseRecord] = field(default_factory=list)
    queries: list[tuple[str, float, float, bool]] = field(default_factory=list)

    def __post_init__(self):
        if self.start is None:
            self.start = self.clock()
        self._lock = threading.Lock()
        self._peak_bytes = 0

    def elapsed(self) -> float:
        return self.clock() - self.start

    def remaining(self) -> float:
        return self.time_budget_s - self.elapsed()

    def checkpoint(self, phase: str) -> float:
        """Close the open phase, open ``phase``; raise once the budget is spent."""
        with self._lock:
            now = self.elapsed()
            if self.phases and self.phases[-1].end_s is None:
                self.phases[-1].end_s = now
            self.phases.append(PhaseRecord(phase, now, None, self._peak_bytes))
            left = self.time_budget_s - now
        if left <= 0:
            raise BudgetExhausted(f"budget of {self.time_budget_s}s spent entering {phase!r}")
        return left

    def finish(self) -> None:
        with self._lock:
            if self.phases and self.phases[-1].end_s is None:
                self.phases[-1].end_s = self.elapsed()

    def note_memory(self, nbytes: float) -> None:
        with self._lock:
            self._peak_bytes = max(self._peak_bytes, int(nbytes))
            if self.phases:
                self.phases[-1].est_peak_bytes = max(self.phases[-1].est_peak_bytes,
                                                     int(nbytes))

    def can_afford(self, cost_s: float, reserve: float = 0.0, what: str = "") -> bool:
        with self._lock:
            left = self.time_budget_s - self.elapsed()
            ok = cost_s <= left * (1.0 - reserve)
            self.queries.append((what, float(cost_s), left, ok))
        if not ok:
            log.info("cannot afford %s: %.2fs needed, %.2fs left", what or "step", cost_s, left)
        return ok

    def deadline(self, reserve_s: float = 0.0) -> Callable[[], bool]:
        """Polling handle that turns True once only ``reserve_s`` seconds remain."""
        return lambda: self.remaining() <= reserve_s

    def dump_phases(self, path: str | Path) -> None:
        self.finish()
        rows = ["phase\tstart_s\tend_s\test_peak_bytes"]
        for p in self.phases:
            end = "" if p.end_s is None else f"{p.end_s:.3f}"
            rows.append(f"{p.name}\t{p.start_s:.3f}\t{end}\t{p.est_peak_bytes}")
        Path(path).write_text("\n".join(rows) + "\n")


@dataclass
class MemoryEstimate:
    bytes_per_row: float
    current_bytes: float
    headroom_bytes: float

    @classmethod
    def for_frame(cls, frame, budget_bytes: float) -> "MemoryEstimate":
        current = frame.nbytes_estimate()
        return cls(frame.bytes_per_row(), current, max(0.0, budget_bytes - current))


def max_rows_for_memory(est: MemoryEstimate, multiplier: float = DEFAULT_MULTIPLIER) -> int:
    if est.bytes_per_row <= 0:
        raise ValueError("bytes_per_row must be positive")
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    return int(est.headroom_bytes // (est.bytes_per_row * multiplier))


def feature_cap(n_rows: int, base: int = 60, floor: int = 10) -> int:
    """Number of generated features to keep per stage; larger data keeps fewer."""
    if n_rows <= 100_000:
        return base
    scaled = int(base * (100_000 / n_rows) ** 0.5)
    return max(floor, scaled)

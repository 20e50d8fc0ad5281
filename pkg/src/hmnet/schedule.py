"""Multi-rate schedule compiler.

Per-step canonical action order (levels run their full cycle's work at the
cycle's first step; values are defined at cycle granularity and the parallel
executor overlaps the wall-clock work):

1. ``down_apply``     target levels with a message generated at step n-1,
                      ascending level
2. ``up_write``       levels l >= 2 with n = 1 (mod C_l) and n > C_l,
                      consuming the snapshot made at step n-1, descending
3. ``image_write``    top level, when fusion is on and n = 1 (mod cadence)
4. ``event_write``    level 1, every step
5. ``update``         levels with n = 1 (mod C_l), ascending
6. ``readout``        levels with n = 0 (mod C_l), ascending
7. ``make_down_message``  sources l+1 -> l at n = 0 (mod C_{l+1}), recorded
                      at the generating (higher) level, when down-write is on
8. ``make_up_snapshot``   level j copied for level j+1 at n = 0 (mod C_{j+1}),
                      recorded at the snapshotted level

Step 0 emits initialization readouts for every level so the latent buffers
are complete from the first step onward.
"""

from __future__ import annotations

import csv
import io
from typing import Iterable, NamedTuple

from .errors import ConfigError
from .model import ModelConfig

DOWN_APPLY = "down_apply"
UP_WRITE = "up_write"
IMAGE_WRITE = "image_write"
EVENT_WRITE = "event_write"
UPDATE = "update"
READOUT = "readout"
MAKE_DOWN_MESSAGE = "make_down_message"
MAKE_UP_SNAPSHOT = "make_up_snapshot"

ACTIONS = (DOWN_APPLY, UP_WRITE, IMAGE_WRITE, EVENT_WRITE, UPDATE, READOUT,
           MAKE_DOWN_MESSAGE, MAKE_UP_SNAPSHOT)


class TraceEntry(NamedTuple):
    step: int
    level: int
    action: str


class ScheduleTrace(list):
    """Ordered (step, level, action) record; list of TraceEntry."""

    def steps_of(self, action: str, level: int | None = None) -> list[int]:
        return [e.step for e in self
                if e.action == action and (level is None or e.level == level)]

    def at_step(self, step: int) -> list[TraceEntry]:
        return [e for e in self if e.step == step]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out)
        writer.writerow(["step", "level", "action"])
        writer.writerows(self)
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScheduleTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["step", "level", "action"]:
            raise ConfigError("not a trace CSV")
        return cls(TraceEntry(int(r[0]), int(r[1]), r[2]) for r in rows[1:] if r)


def _hits_cycle_start(n: int, cycle: int) -> bool:
    return n % cycle == 1 % cycle


def compile_schedule(config: ModelConfig, n_steps: int) -> ScheduleTrace:
    """Expand the multi-rate rules into the canonical flat action list."""
    if n_steps < 1:
        raise ConfigError("n_steps must be >= 1")
    L = config.levels
    cyc = config.cycles
    kappa = config.cadence_steps
    trace = ScheduleTrace(TraceEntry(0, l, READOUT) for l in range(1, L + 1))
    for n in range(1, n_steps + 1):
        if config.down_write:
            for lo in range(1, L):
                m = n - 1
                if m > 0 and m % cyc[lo] == 0:  # message made at step n-1 by lo+1
                    trace.append(TraceEntry(n, lo, DOWN_APPLY))
        for l in range(L, 1, -1):
            if n > cyc[l - 1] and _hits_cycle_start(n, cyc[l - 1]):
                trace.append(TraceEntry(n, l, UP_WRITE))
        if config.fusion and _hits_cycle_start(n, kappa):
            trace.append(TraceEntry(n, L, IMAGE_WRITE))
        trace.append(TraceEntry(n, 1, EVENT_WRITE))
        for l in range(1, L + 1):
            if _hits_cycle_start(n, cyc[l - 1]):
                trace.append(TraceEntry(n, l, UPDATE))
        for l in range(1, L + 1):
            if n % cyc[l - 1] == 0:
                trace.append(TraceEntry(n, l, READOUT))
        if config.down_write:
            for lo in range(1, L):
                if n % cyc[lo] == 0:
                    trace.append(TraceEntry(n, lo + 1, MAKE_DOWN_MESSAGE))
        for j in range(1, L):
            if n % cyc[j] == 0:
                trace.append(TraceEntry(n, j, MAKE_UP_SNAPSHOT))
    return trace


def filter_level(trace: Iterable[TraceEntry], level: int) -> list[TraceEntry]:
    """The slice of the trace one level's worker executes, in order."""
    return [e for e in trace if e.level == level]

"""Schedule executors.

``run_sequential`` is the normative semantics: one worker applies the
compiled trace in order. It can record a tape for backpropagation through
time (``record=True``) and instrument per-action MAC counts and wall times
(``instrument=True``).

``run_parallel`` runs one thread per level. Cross-level data moves only as
immutable snapshots (grid copy + version) and DownMessages through FIFO
queues, exactly mirroring the schedule's make/consume pairing, so its
outputs (every buffer view and final state) are bit-identical to the
sequential executor regardless of thread timing.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import memory
from .errors import ConfigError, HmnetError
from .events import EventSlice
from .memory import DownMessage, MemoryState, Readout
from .model import Model
from .ops import MACS
from .schedule import (DOWN_APPLY, EVENT_WRITE, IMAGE_WRITE,
                       MAKE_DOWN_MESSAGE, MAKE_UP_SNAPSHOT, READOUT,
                       UP_WRITE, UPDATE, ScheduleTrace, TraceEntry,
                       compile_schedule, filter_level)


@dataclass(frozen=True)
class StepView:
    """Latent-buffer contents after one step: per level, the latest readout."""

    step: int
    readouts: dict[int, Readout]


@dataclass
class ActionRecord:
    entry: TraceEntry
    macs: int
    wall_ns: int
    n_active_cells: int = 0
    n_events: int = 0


@dataclass
class TapeItem:
    entry: TraceEntry
    cache: object
    meta: tuple = ()


@dataclass
class RunResult:
    views: list[StepView]
    final_states: dict[int, MemoryState]
    executed: list[TraceEntry]
    actions: list[ActionRecord] | None = None
    tape: list[TapeItem] | None = None
    worker_step_ns: dict[tuple[int, int], int] | None = None  # (level, step)


class Snapshot(NamedTuple):
    grid: np.ndarray
    version: int
    step: int


def views_equal(a: list[StepView], b: list[StepView]) -> bool:
    """Bitwise equality of two executors' observable outputs."""
    if len(a) != len(b):
        return False
    for va, vb in zip(a, b):
        if va.step != vb.step or va.readouts.keys() != vb.readouts.keys():
            return False
        for l, ra in va.readouts.items():
            rb = vb.readouts[l]
            if ra.step != rb.step or not np.array_equal(ra.data, rb.data):
                return False
    return True


def required_images(config, n_steps: int) -> int:
    if not config.fusion or n_steps < 1:
        return 0
    return (n_steps - 1) // config.cadence_steps + 1


def _check_inputs(config, slices, images):
    if not slices:
        raise ConfigError("need at least one event slice")
    need = required_images(config, len(slices))
    have = 0 if images is None else len(images)
    if have < need:
        raise ConfigError(f"fusion needs {need} image frames, got {have}")


def run_sequential(model: Model, slices: list[EventSlice], images=None,
                   record: bool = False, instrument: bool = False) -> RunResult:
    """Execute the compiled schedule with a single worker; bit-deterministic."""
    config = model.config
    _check_inputs(config, slices, images)
    store = model.store
    heads = config.heads
    trace = compile_schedule(config, len(slices))
    states = model.initial_states()
    buffers: dict[int, Readout] = {}
    pending: dict[int, DownMessage] = {}
    snapshots: dict[int, Snapshot] = {}
    views: list[StepView] = []
    executed: list[TraceEntry] = []
    tape: list[TapeItem] | None = [] if record else None
    actions: list[ActionRecord] | None = [] if instrument else None
    image_idx = 0

    def dispatch(e: TraceEntry):
        nonlocal image_idx
        n, l, act = e
        cache, meta = None, ()
        counts = (0, 0)
        if act == DOWN_APPLY:
            msg = pending.pop(l)
            states[l] = memory.down_write_apply(states[l], msg)
            meta = (l, n - 1)
        elif act == UP_WRITE:
            snap = snapshots[l - 1]
            states[l], cache = memory.up_write_fwd(states[l], snap.grid, store, heads[l - 1])
            meta = (l - 1, snap.step)
        elif act == IMAGE_WRITE:
            states[l], cache = memory.image_write_fwd(states[l], images[image_idx],
                                                      store, heads[l - 1])
            image_idx += 1
        elif act == EVENT_WRITE:
            sl = slices[n - 1]
            states[1], cache = memory.event_write_fwd(states[1], sl, store, heads[0],
                                                      config.event_gate)
            counts = (0 if cache is None else cache[2].n_active, len(sl))
        elif act == UPDATE:
            states[l], cache = memory.update_state_fwd(states[l], store)
        elif act == READOUT:
            ro, cache = memory.readout_fwd(states[l], store, step=n)
            buffers[l] = ro
        elif act == MAKE_DOWN_MESSAGE:
            lo = l - 1
            msg, cache = memory.down_write_make_message_fwd(
                states[l], states[lo].snapshot(), states[lo].version, store, heads[l - 1])
            pending[lo] = msg
            meta = (lo, n)
        elif act == MAKE_UP_SNAPSHOT:
            snapshots[l] = Snapshot(states[l].snapshot(), states[l].version, n)
            meta = (l, n)
        else:
            raise HmnetError(f"unknown action {act}")
        return cache, meta, counts

    cur_step = 0
    for e in trace:
        if e.step != cur_step:
            views.append(StepView(cur_step, dict(buffers)))
            cur_step = e.step
        if instrument:
            MACS.enabled, MACS.total = True, 0
            t0 = time.perf_counter_ns()
            cache, meta, counts = dispatch(e)
            wall = time.perf_counter_ns() - t0
            actions.append(ActionRecord(e, MACS.total, wall, counts[0], counts[1]))
            MACS.enabled = False
        else:
            cache, meta, counts = dispatch(e)
        executed.append(e)
        if record:
            tape.append(TapeItem(e, cache, meta))
    views.append(StepView(cur_step, dict(buffers)))
    return RunResult(views, states, executed, actions, tape)


def backward_tape(model: Model, tape: list[TapeItem],
                  d_readouts: dict[tuple[int, int], np.ndarray],
                  d_final: dict[int, np.ndarray] | None = None) -> None:
    """Reverse pass over a recorded run. ``d_readouts`` maps (level, stamp)
    to the loss gradient of that readout. Parameter gradients (including the
    learnable initial states) accumulate into the model's store."""
    store = model.store
    d_state = {l: (np.zeros_like(s.grid) if d_final is None else d_final[l].copy())
               for l, s in model.initial_states().items()}
    d_snap: dict[tuple[int, int], np.ndarray] = {}
    d_msg: dict[tuple[int, int], np.ndarray] = {}

    for item in reversed(tape):
        n, l, act = item.entry
        if act == READOUT:
            d = d_readouts.get((l, n))
            if d is not None:
                d_state[l] += memory.readout_bwd(item.cache, d, store)
        elif act == UPDATE:
            d_state[l] = memory.update_state_bwd(item.cache, d_state[l], store)
        elif act == EVENT_WRITE:
            d_state[1] = memory.event_write_bwd(item.cache, d_state[1], store)
        elif act == UP_WRITE:
            dz, dsnap = memory.up_write_bwd(item.cache, d_state[l], store)
            d_state[l] = dz
            key = item.meta
            d_snap[key] = d_snap.get(key, 0) + dsnap
        elif act == IMAGE_WRITE:
            d_state[l] = memory.image_write_bwd(item.cache, d_state[l], store)
        elif act == DOWN_APPLY:
            d_msg[item.meta] = d_msg.get(item.meta, 0) + d_state[l]
        elif act == MAKE_DOWN_MESSAGE:
            dd = d_msg.pop(item.meta, None)
            if dd is not None:
                d_hi, d_lo_snap = memory.down_write_make_message_bwd(item.cache, dd, store)
                d_state[l] += d_hi
                d_state[l - 1] += d_lo_snap
        elif act == MAKE_UP_SNAPSHOT:
            dd = d_snap.pop(item.meta, None)
            if dd is not None:
                d_state[l] += dd
    for l, d in d_state.items():
        store.accumulate(f"mem{l}.init.v", d.sum(axis=(0, 1)))


# ---------------------------------------------------------------------------
# parallel executor


class _Context:
    def __init__(self, model, slices, images, delays, time_steps=False):
        self.model = model
        self.slices = slices
        self.images = images or []
        self.delays = delays or {}
        self.time_steps = time_steps
        L = model.config.levels
        self.snap_q = {l: queue.Queue() for l in range(2, L + 1)}   # from l-1 into l
        self.msg_q = {l: queue.Queue() for l in range(1, L)}        # from l+1 into l
        self.readouts: list[Readout] = []
        self.lock = threading.Lock()
        self.final: dict[int, MemoryState] = {}
        self.step_ns: dict[tuple[int, int], int] = {}
        self.errors: list[BaseException] = []


class _LevelWorker(threading.Thread):
    """Executes one level's slice of the trace; blocks on queue reads at
    exactly the schedule's transfer points."""

    def __init__(self, level: int, actions: list[TraceEntry], state: MemoryState,
                 ctx: _Context):
        super().__init__(name=f"hmnet-level-{level}", daemon=True)
        self.level = level
        self.actions = actions
        self.state = state
        self.ctx = ctx
        self.stash: Snapshot | None = None

    def _ensure_snapshot(self, made_step: int) -> Snapshot:
        while self.stash is None or self.stash.step < made_step:
            self.stash = self.ctx.snap_q[self.level].get()
        if self.stash.step != made_step:
            raise HmnetError(f"snapshot stream out of order at level {self.level}")
        return self.stash

    def run(self):
        try:
            self._run()
        except BaseException as exc:  # surfaced by the coordinator
            self.ctx.errors.append(exc)

    def _run(self):
        ctx = self.ctx
        config = ctx.model.config
        store = ctx.model.store
        heads = config.heads[self.level - 1]
        delay = ctx.delays.get(self.level, 0.0)
        image_idx = 0
        last_step = None
        for e in self.actions:
            n, l, act = e
            if delay and n != last_step:
                time.sleep(delay)
            last_step = n
            t0 = time.perf_counter_ns() if ctx.time_steps else 0
            if act == DOWN_APPLY:
                msg = ctx.msg_q[l].get()
                self.state = memory.down_write_apply(self.state, msg)
            elif act == UP_WRITE:
                snap = self._ensure_snapshot(n - 1)
                self.state, _ = memory.up_write_fwd(self.state, snap.grid, store, heads)
            elif act == IMAGE_WRITE:
                self.state, _ = memory.image_write_fwd(self.state, ctx.images[image_idx],
                                                       store, heads)
                image_idx += 1
            elif act == EVENT_WRITE:
                self.state, _ = memory.event_write_fwd(self.state, ctx.slices[n - 1],
                                                       store, heads, config.event_gate)
            elif act == UPDATE:
                self.state, _ = memory.update_state_fwd(self.state, store)
            elif act == READOUT:
                ro, _ = memory.readout_fwd(self.state, store, step=n)
                with ctx.lock:
                    ctx.readouts.append(ro)
            elif act == MAKE_DOWN_MESSAGE:
                snap = self._ensure_snapshot(n)
                msg, _ = memory.down_write_make_message_fwd(
                    self.state, snap.grid, snap.version, store, heads)
                ctx.msg_q[l - 1].put(msg)
            elif act == MAKE_UP_SNAPSHOT:
                ctx.snap_q[l + 1].put(Snapshot(self.state.snapshot(), self.state.version, n))
            if ctx.time_steps:
                key = (self.level, n)
                elapsed = time.perf_counter_ns() - t0
                with ctx.lock:
                    ctx.step_ns[key] = ctx.step_ns.get(key, 0) + elapsed
        with ctx.lock:
            ctx.final[self.level] = self.state


def run_parallel(model: Model, slices: list[EventSlice], workers: int,
                 images=None, delays: dict[int, float] | None = None,
                 time_steps: bool = False) -> RunResult:
    """One logical worker per level (threads); observationally bit-identical
    to :func:`run_sequential`. ``workers`` caps parallelism: 1 runs the
    sequential engine, anything higher enables per-level threading (levels
    are at most 3). ``delays`` injects per-level sleeps for testing."""
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    config = model.config
    if workers == 1 or config.levels == 1:
        res = run_sequential(model, slices, images)
        return res
    _check_inputs(config, slices, images)
    n_steps = len(slices)
    trace = compile_schedule(config, n_steps)
    ctx = _Context(model, slices, images, delays, time_steps)
    init = model.initial_states()
    threads = []
    for l in range(1, config.levels + 1):
        actions = filter_level(trace, l)
        # step-0 readouts are part of each worker's stream already
        threads.append(_LevelWorker(l, actions, init[l], ctx))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if ctx.errors:
        raise ctx.errors[0]

    by_stamp = {(ro.level, ro.step): ro for ro in ctx.readouts}
    views = []
    for n in range(0, n_steps + 1):
        ros = {}
        for l in range(1, config.levels + 1):
            stamp = (n // config.cycles[l - 1]) * config.cycles[l - 1]
            ros[l] = by_stamp[(l, stamp)]
        views.append(StepView(n, ros))
    return RunResult(views, ctx.final, list(trace),
                     worker_step_ns=ctx.step_ns if time_steps else None)

"""Wall-clock latency benchmark over the executors, plus the compiled-vs-
python kernel comparison.

Reports use one CSV schema, ``step,level,action,macs,wall_ns``:

* the step report has one row per step (level ``all``, action ``step``,
  median wall over repetitions, exact step MACs);
* the action report attributes time per executed action (sequential mode)
  or per worker step (parallel mode).

Warm-up runs are excluded. Per-level stats are p50/p95/max over
(repetition, step) samples.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from ._backend import active_backend, native_available, set_backend
from .errors import ConfigError
from .executor import run_parallel, run_sequential
from .model import Model

CSV_HEADER = ["step", "level", "action", "macs", "wall_ns"]


@dataclass
class LevelStats:
    p50: float
    p95: float
    max: float


@dataclass
class BenchReport:
    mode: str
    repetitions: int
    step_rows: list[dict] = field(default_factory=list)
    action_rows: list[dict] = field(default_factory=list)
    level_stats: dict = field(default_factory=dict)

    def write_csv(self, steps_path, actions_path=None) -> None:
        _write_rows(steps_path, self.step_rows)
        if actions_path is not None:
            _write_rows(actions_path, self.action_rows)


def _write_rows(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        writer.writeheader()
        writer.writerows(rows)


def _percentiles(samples) -> LevelStats:
    arr = sorted(samples)
    return LevelStats(
        p50=float(np.percentile(arr, 50)),
        p95=float(np.percentile(arr, 95)),
        max=float(arr[-1]),
    )


def benchmark_latency(model: Model, slices, repetitions: int, workers: int = 1,
                      images=None) -> BenchReport:
    """Measure per-step wall time over ``repetitions`` runs (one unmeasured
    warm-up first). Sequential mode attributes time per action; parallel
    mode reports per-worker step times."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    mode = "sequential" if workers <= 1 or model.config.levels == 1 else "parallel"
    report = BenchReport(mode, repetitions)

    if mode == "sequential":
        run_sequential(model, slices, images=images)  # warm-up
        per_rep = []
        for _ in range(repetitions):
            res = run_sequential(model, slices, images=images, instrument=True)
            per_rep.append(res.actions)
        n_steps = len(slices)
        # action rows: median wall over reps, MACs identical across reps
        base = per_rep[0]
        for i, rec in enumerate(base):
            if rec.entry.step == 0:
                continue
            walls = [rep[i].wall_ns for rep in per_rep]
            report.action_rows.append({
                "step": rec.entry.step, "level": rec.entry.level,
                "action": rec.entry.action, "macs": rec.macs,
                "wall_ns": int(statistics.median(walls)),
            })
        step_wall: dict[int, list[int]] = {n: [] for n in range(1, n_steps + 1)}
        step_macs = {n: 0 for n in range(1, n_steps + 1)}
        level_wall: dict[int, list[int]] = {}
        for rep in per_rep:
            acc: dict[int, int] = {}
            lvl_acc: dict[tuple[int, int], int] = {}
            for rec in rep:
                if rec.entry.step == 0:
                    continue
                acc[rec.entry.step] = acc.get(rec.entry.step, 0) + rec.wall_ns
                key = (rec.entry.level, rec.entry.step)
                lvl_acc[key] = lvl_acc.get(key, 0) + rec.wall_ns
            for n, w in acc.items():
                step_wall[n].append(w)
            for (l, _n), w in lvl_acc.items():
                level_wall.setdefault(l, []).append(w)
        for rec in base:
            if rec.entry.step:
                step_macs[rec.entry.step] += rec.macs
        for n in range(1, n_steps + 1):
            report.step_rows.append({
                "step": n, "level": "all", "action": "step",
                "macs": step_macs[n], "wall_ns": int(statistics.median(step_wall[n])),
            })
        for l, samples in sorted(level_wall.items()):
            report.level_stats[l] = _percentiles(samples)
        report.level_stats["all"] = _percentiles(
            [w for ws in step_wall.values() for w in ws])
        return report

    # parallel: per-worker wall per step
    run_parallel(model, slices, workers, images=images)  # warm-up
    samples: dict[tuple[int, int], list[int]] = {}
    total_walls = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        res = run_parallel(model, slices, workers, images=images, time_steps=True)
        total_walls.append(time.perf_counter_ns() - t0)
        for (l, n), w in (res.worker_step_ns or {}).items():
            samples.setdefault((l, n), []).append(w)
    for (l, n), ws in sorted(samples.items()):
        report.action_rows.append({
            "step": n, "level": l, "action": "worker_step", "macs": 0,
            "wall_ns": int(statistics.median(ws)),
        })
    by_step: dict[int, list[int]] = {}
    for (l, n), ws in samples.items():
        by_step.setdefault(n, []).append(int(statistics.median(ws)))
    for n in sorted(by_step):
        report.step_rows.append({
            "step": n, "level": "all", "action": "step", "macs": 0,
            "wall_ns": max(by_step[n]),  # critical-path worker
        })
    by_level: dict[int, list[int]] = {}
    for (l, _n), ws in samples.items():
        by_level.setdefault(l, []).extend(ws)
    for l, ws in sorted(by_level.items()):
        report.level_stats[l] = _percentiles(ws)
    report.level_stats["all"] = _percentiles(total_walls)
    return report


# ---------------------------------------------------------------------------
# backend comparison


def _time_call(fn, repetitions=5):
    fn()  # warm-up
    best = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        fn()
        best.append(time.perf_counter_ns() - t0)
    return int(statistics.median(best))


def kernel_microbench(repetitions: int = 5, seed: int = 0) -> list[dict]:
    """Median times of the two backend kernels on production-ish shapes,
    pure numpy vs the compiled extension (when built)."""
    from . import _kernels_py
    rng = np.random.default_rng(seed)
    cells, events, heads, dh = 400, 4000, 4, 32
    q = rng.normal(size=(cells, heads, dh))
    k = rng.normal(size=(events, heads, dh))
    v = rng.normal(size=(events, heads, dh))
    bounds = np.sort(rng.choice(np.arange(1, events), size=cells - 1, replace=False))
    starts = np.concatenate([[0], bounds, [events]]).astype(np.int64)
    gate = np.zeros(heads)
    x = rng.normal(size=(64, 64, 128))
    w = rng.normal(size=(3, 3, 128, 128)) * 0.05
    b = np.zeros(128)

    backends = [("py", _kernels_py)]
    if native_available():
        from . import _core
        backends.append(("native", _core))

    rows = []
    for name, mod in backends:
        h, a_ev, a_gate = mod.esca_attn_fwd(q, k, v, starts, gate)
        rows.append({"kernel": "esca_attn_fwd", "backend": name,
                     "wall_ns": _time_call(lambda m=mod: m.esca_attn_fwd(q, k, v, starts, gate),
                                           repetitions)})
        dh_out = rng.normal(size=h.shape)
        rows.append({"kernel": "esca_attn_bwd", "backend": name,
                     "wall_ns": _time_call(
                         lambda m=mod: m.esca_attn_bwd(q, k, v, starts, gate, a_ev, a_gate, dh_out),
                         repetitions)})
        rows.append({"kernel": "conv2d_fwd_64x64x128", "backend": name,
                     "wall_ns": _time_call(lambda m=mod: m.conv2d_fwd(x, w, b, 1),
                                           repetitions)})
    return rows


def compare_backends(model: Model, slices, repetitions: int = 3) -> list[dict]:
    """End-to-end sequential step latency under each backend mode."""
    modes = ["py"] + (["native", "auto"] if native_available() else [])
    current = active_backend().name
    rows = []
    try:
        for mode in modes:
            set_backend(mode)
            rep = benchmark_latency(model, slices, repetitions)
            rows.append({
                "backend": mode,
                "p50_step_ns": int(rep.level_stats["all"].p50),
                "p95_step_ns": int(rep.level_stats["all"].p95),
                "max_step_ns": int(rep.level_stats["all"].max),
            })
    finally:
        set_backend(current if current in ("py", "native", "auto") else "auto")
    return rows

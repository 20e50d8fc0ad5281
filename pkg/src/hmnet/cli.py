"""Command-line entry point.

Subcommands: ``gen`` (synthetic streams), ``run`` (inference over an event
file), ``trace`` (compile + dump the schedule), ``bench`` (latency / MACs /
backend comparison), ``gradcheck``, ``train-demo``.

Every run writes its exact resolved configuration into the output directory
for reproducibility. On failure the process exits non-zero after printing a
single machine-readable line ``hmnet-error {...json...}`` to stderr. The
environment variable ``HMNET_THREADS`` caps the worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import benchmark, checks, events, executor, gradcheck, train
from ._backend import active_backend
from .errors import ConfigError, HmnetError
from .model import Model, ModelConfig, build_model, variant_config
from .params import ParameterStore
from .schedule import compile_schedule


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON model/run configuration")
    p.add_argument("--variant", default=None,
                   help="variant name (b1, l1, b3, l3, b1-tiny, b3-tiny)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--precision", choices=["f32", "f64"], default=None)
    p.add_argument("--no-event-gate", action="store_true",
                   help="disable the noise gate inside the event attention")
    p.add_argument("--no-down-write", action="store_true",
                   help="disable top-down residual messages")
    p.add_argument("--dt-us", type=int, default=None, help="time step override")
    p.add_argument("--cycles", default=None,
                   help="per-level operating cycles, e.g. 1,3,9")
    p.add_argument("--width", type=int, default=None, help="sensor width override")
    p.add_argument("--height", type=int, default=None, help="sensor height override")


def _worker_cap(requested: int) -> int:
    cap = os.environ.get("HMNET_THREADS")
    if cap:
        return max(1, min(requested, int(cap)))
    return max(1, requested)


def resolve_config(args, sensor=None) -> ModelConfig:
    """Merge config file / variant defaults with command-line overrides."""
    if args.config:
        cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        variant = args.variant or "b3-tiny"
        w, h = sensor or (64, 64)
        cfg = variant_config(variant, w, h)
    over = {}
    if sensor is not None:
        over["sensor_width"], over["sensor_height"] = sensor
    if args.width is not None:
        over["sensor_width"] = args.width
    if args.height is not None:
        over["sensor_height"] = args.height
    if args.seed is not None:
        over["seed"] = args.seed
    if args.precision is not None:
        over["precision"] = args.precision
    if args.dt_us is not None:
        over["dt_us"] = args.dt_us
    if args.cycles is not None:
        cycles = tuple(int(v) for v in args.cycles.split(","))
        over["cycles"] = cycles
    if args.no_event_gate:
        over["event_gate"] = False
    if args.no_down_write:
        over["down_write"] = False
    return dataclasses.replace(cfg, **over) if over else cfg


def _prepare_out(args, cfg: ModelConfig) -> Path:
    out = Path(args.out) if args.out else Path("out")
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(cfg.to_json())
    return out


def _load_events(path: Path) -> events.EventStream:
    fmt = "csv" if path.suffix == ".csv" else "hmev-binary"
    return events.parse_event_file(path.read_bytes(), fmt)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    scene = events.SceneParams(
        args.width or 64, args.height or 64, args.duration_ms,
        (events.MovingObject(args.x0, args.y0, args.obj_width, args.obj_height,
                             args.vx, args.vy),))
    stream, gt = events.generate_synthetic_stream(scene, args.noise_rate,
                                                  args.seed or 0)
    out = Path(args.events)
    out.parent.mkdir(parents=True, exist_ok=True)
    fmt = "csv" if out.suffix == ".csv" else "hmev-binary"
    out.write_bytes(events.encode_event_file(stream, fmt))
    gt_path = out.with_suffix(out.suffix + ".gt.json")
    gt_path.write_text(json.dumps({
        "speed_px_per_ms": gt.speed_px_per_ms.tolist(),
        "sensor": [scene.sensor_width, scene.sensor_height],
        "n_events": len(stream),
    }))
    if args.frames_out:
        cadence = args.frame_cadence_us
        n_frames = (scene.duration_ms * 1000 - 1) // cadence + 1
        frames = []
        for i in range(n_frames):
            t_ms = i * cadence / 1000.0
            gray = events._render_frame(scene, t_ms)
            frames.append(np.repeat(gray[:, :, None], 3, axis=2))
        np.savez_compressed(args.frames_out, frames=np.stack(frames))
    print(f"wrote {len(stream)} events to {out}")
    return 0


def cmd_run(args) -> int:
    stream = _load_events(Path(args.events))
    cfg = resolve_config(args, sensor=(stream.sensor_width, stream.sensor_height))
    out = _prepare_out(args, cfg)
    if args.checkpoint:
        store = ParameterStore.load(args.checkpoint)
        model = Model(cfg, store)
    else:
        model = build_model(cfg)
    slices = events.slice_stream(stream, cfg.dt_us)
    if args.steps:
        slices = slices[:args.steps]
    if not slices:
        raise ConfigError("event file produced no slices")
    images = None
    if args.frames:
        frames = np.load(args.frames)["frames"]
        images = [frames[i] for i in range(frames.shape[0])]
    workers = _worker_cap(args.workers)
    if workers > 1:
        res = executor.run_parallel(model, slices, workers, images=images)
    else:
        res = executor.run_sequential(model, slices, images=images)
    trace = compile_schedule(cfg, len(slices))
    (out / "trace.csv").write_text(trace.to_csv())
    model.store.save(out / "checkpoint.hmck")
    if args.save_readouts:
        arrays = {}
        for view in res.views:
            for l, ro in view.readouts.items():
                arrays[f"step{view.step:05d}_level{l}_stamp{ro.step:05d}"] = ro.data
        np.savez_compressed(out / "readouts.npz", **arrays)
    summary = {
        "steps": len(slices),
        "events": len(stream),
        "workers": workers,
        "backend": active_backend().name,
        "final_versions": {l: s.version for l, s in res.final_states.items()},
    }
    (out / "run_summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return 0


def cmd_trace(args) -> int:
    cfg = resolve_config(args)
    trace = compile_schedule(cfg, args.steps)
    if args.out:
        out = _prepare_out(args, cfg)
        (out / "trace.csv").write_text(trace.to_csv())
        print(f"wrote {len(trace)} actions to {out / 'trace.csv'}")
    else:
        sys.stdout.write(trace.to_csv())
    return 0


def cmd_bench(args) -> int:
    if args.events:
        stream = _load_events(Path(args.events))
        cfg = resolve_config(args, sensor=(stream.sensor_width, stream.sensor_height))
        slices = events.slice_stream(stream, cfg.dt_us)[:args.steps]
    else:
        cfg = resolve_config(args)
        scene = events.SceneParams(
            cfg.sensor_width, cfg.sensor_height, args.steps * cfg.dt_us // 1000,
            (events.MovingObject(1, 0, 2, cfg.sensor_height, 800.0, 0.0),))
        stream, _ = events.generate_synthetic_stream(scene, 3.0, cfg.seed)
        slices = events.slice_stream(stream, cfg.dt_us)[:args.steps]
    out = _prepare_out(args, cfg)
    model = build_model(cfg)
    workers = _worker_cap(args.workers)
    report = benchmark.benchmark_latency(model, slices, args.repetitions, workers)
    report.write_csv(out / "bench_steps.csv", out / "bench_actions.csv")
    for l, st in report.level_stats.items():
        print(f"level {l}: p50={st.p50 / 1e6:.3f} ms  p95={st.p95 / 1e6:.3f} ms  "
              f"max={st.max / 1e6:.3f} ms")
    if args.compare_backends:
        rows = benchmark.compare_backends(model, slices, max(1, args.repetitions // 2))
        krows = benchmark.kernel_microbench()
        with open(out / "backends.csv", "w") as fh:
            fh.write("scope,backend,metric,wall_ns\n")
            for r in rows:
                for metric in ("p50_step_ns", "p95_step_ns", "max_step_ns"):
                    fh.write(f"pipeline,{r['backend']},{metric},{r[metric]}\n")
            for r in krows:
                fh.write(f"{r['kernel']},{r['backend']},median,{r['wall_ns']}\n")
        for r in rows:
            print(f"backend {r['backend']}: p50 step {r['p50_step_ns'] / 1e6:.3f} ms")
        for r in krows:
            print(f"kernel {r['kernel']} [{r['backend']}]: {r['wall_ns'] / 1e3:.1f} us")
    return 0


def cmd_gradcheck(args) -> int:
    ops_filter = args.ops.split(",") if args.ops else None
    reports = checks.run_all(seeds=args.seeds, ops_filter=ops_filter)
    out = Path(args.out) if args.out else Path("out")
    out.mkdir(parents=True, exist_ok=True)
    gradcheck.write_report_csv(out / "gradcheck.csv", reports)
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(f"{r.op} seed {r.seed}: max_rel_err {r.max_rel_err:.3e} "
              f"{'PASS' if r.passed else 'FAIL'}")
    if failed:
        raise HmnetError(f"{len(failed)} gradient checks failed; see {out / 'gradcheck.csv'}")
    return 0


def cmd_train_demo(args) -> int:
    if args.config:
        cfg = resolve_config(args)
    else:
        cfg = resolve_config(args if args.variant else
                             argparse.Namespace(**{**vars(args), "variant": "b1-tiny"}))
        if cfg.sensor_width > 32:
            cfg = dataclasses.replace(cfg, sensor_width=32, sensor_height=32)
    out = _prepare_out(args, cfg)
    res = train.train_demo(cfg, args.iterations, args.lr)
    res.write_curve(out / "loss_curve.csv")
    res.model.store.save(out / "checkpoint.hmck")
    ratio = res.final_smoothed / res.initial_smoothed if res.initial_smoothed else 0.0
    print(json.dumps({
        "iterations": args.iterations,
        "initial_smoothed_loss": res.initial_smoothed,
        "final_smoothed_loss": res.final_smoothed,
        "ratio": ratio,
    }))
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmnet",
        description="multi-rate hierarchical event-memory compute core")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic event stream")
    _add_common(p)
    p.add_argument("--events", required=True, help="output file (.csv or .hmev)")
    p.add_argument("--duration-ms", type=int, default=100)
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--y0", type=float, default=0.0)
    p.add_argument("--obj-width", type=float, default=2.0)
    p.add_argument("--obj-height", type=float, default=64.0)
    p.add_argument("--vx", type=float, default=800.0, help="px/s")
    p.add_argument("--vy", type=float, default=0.0, help="px/s")
    p.add_argument("--noise-rate", type=float, default=0.0, help="events/px/s")
    p.add_argument("--frames-out", default=None,
                   help="also write rendered frames (.npz) for sensor fusion")
    p.add_argument("--frame-cadence-us", type=int, default=45_000)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="run inference over an event file")
    _add_common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--steps", type=int, default=None, help="cap the step count")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--frames", type=Path, default=None, help="fusion frames (.npz)")
    p.add_argument("--save-readouts", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("trace", help="compile and dump the schedule")
    _add_common(p)
    p.add_argument("--steps", type=int, default=18)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("bench", help="latency / MACs benchmark")
    _add_common(p)
    p.add_argument("--events", default=None)
    p.add_argument("--steps", type=int, default=18)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--compare-backends", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--ops", default=None, help="comma-separated op filter")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-demo", help="tiny synthetic-regression training demo")
    _add_common(p)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--lr", type=float, default=5e-3)
    p.set_defaults(func=cmd_train_demo)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except HmnetError as exc:
        line = json.dumps({"type": type(exc).__name__, "message": str(exc)})
        print(f"hmnet-error {line}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

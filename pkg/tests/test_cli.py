import json
import os
import subprocess
import sys

import numpy as np
import pytest

from hmnet import cli
from hmnet.model import ModelConfig
from hmnet.schedule import ScheduleTrace


def run_cli(argv):
    return cli.main([str(a) for a in argv])


def test_gen_and_run_round_trip(tmp_path, capsys):
    ev = tmp_path / "stream.hmev"
    assert run_cli(["gen", "--events", ev, "--width", "64", "--height", "64",
                    "--duration-ms", "60", "--seed", "3", "--noise-rate", "2"]) == 0
    assert ev.exists() and ev.with_suffix(".hmev.gt.json").exists()

    out = tmp_path / "run"
    assert run_cli(["run", "--events", ev, "--variant", "b3-tiny",
                    "--out", out, "--steps", "9"]) == 0
    assert (out / "resolved_config.json").exists()
    assert (out / "trace.csv").exists()
    assert (out / "checkpoint.hmck").exists()
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["steps"] == 9
    cfg = ModelConfig.from_json((out / "resolved_config.json").read_text())
    assert cfg.sensor_width == 64 and cfg.variant == "b3-tiny"


def test_run_parallel_and_readouts(tmp_path):
    ev = tmp_path / "s.hmev"
    run_cli(["gen", "--events", ev, "--width", "64", "--height", "64",
             "--duration-ms", "50", "--seed", "1"])
    out = tmp_path / "run"
    assert run_cli(["run", "--events", ev, "--variant", "b3-tiny", "--out", out,
                    "--workers", "3", "--save-readouts", "--steps", "9"]) == 0
    data = np.load(out / "readouts.npz")
    assert any(k.startswith("step00009_level3") for k in data.files)


def test_trace_subcommand(tmp_path):
    out = tmp_path / "tr"
    assert run_cli(["trace", "--variant", "b3-tiny", "--steps", "18",
                    "--out", out]) == 0
    trace = ScheduleTrace.from_csv((out / "trace.csv").read_text())
    assert trace.steps_of("up_write", 2) == [4, 7, 10, 13, 16]


def test_trace_ablation_flags(tmp_path):
    out = tmp_path / "tr"
    assert run_cli(["trace", "--variant", "b3-tiny", "--steps", "18",
                    "--no-down-write", "--out", out]) == 0
    trace = ScheduleTrace.from_csv((out / "trace.csv").read_text())
    assert not trace.steps_of("make_down_message")
    cfg = ModelConfig.from_json((out / "resolved_config.json").read_text())
    assert cfg.down_write is False


def test_cycles_and_dt_overrides(tmp_path):
    out = tmp_path / "tr"
    assert run_cli(["trace", "--variant", "b3-tiny", "--steps", "12",
                    "--cycles", "1,2,6", "--dt-us", "3000", "--out", out]) == 0
    cfg = ModelConfig.from_json((out / "resolved_config.json").read_text())
    assert cfg.cycles == (1, 2, 6) and cfg.dt_us == 3000


def test_machine_readable_error_line(tmp_path, capsys):
    rc = run_cli(["trace", "--variant", "b3-tiny", "--cycles", "2,3,9",
                  "--out", tmp_path / "x"])
    assert rc == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("hmnet-error ")
    payload = json.loads(err[len("hmnet-error "):])
    assert payload["type"] == "ConfigError"


def test_bench_reports(tmp_path, capsys):
    out = tmp_path / "bench"
    assert run_cli(["bench", "--variant", "b3-tiny", "--steps", "9",
                    "--repetitions", "2", "--out", out]) == 0
    lines = (out / "bench_steps.csv").read_text().splitlines()
    assert lines[0] == "step,level,action,macs,wall_ns"
    assert len(lines) == 1 + 9  # one row per step
    actions = (out / "bench_actions.csv").read_text().splitlines()
    assert len(actions) > 10


def test_bench_rejects_zero_repetitions(tmp_path):
    rc = run_cli(["bench", "--variant", "b3-tiny", "--steps", "4",
                  "--repetitions", "0", "--out", tmp_path / "b"])
    assert rc == 1


def test_gradcheck_subcommand(tmp_path, capsys):
    out = tmp_path / "gc"
    assert run_cli(["gradcheck", "--ops", "affine,softmax_row", "--seeds", "2",
                    "--out", out]) == 0
    lines = (out / "gradcheck.csv").read_text().splitlines()
    assert lines[0] == "op,param,max_rel_err,pass"


def test_train_demo_subcommand(tmp_path, capsys):
    out = tmp_path / "demo"
    assert run_cli(["train-demo", "--iterations", "4", "--lr", "0.002",
                    "--seed", "2", "--out", out]) == 0
    assert (out / "loss_curve.csv").exists()
    assert (out / "checkpoint.hmck").exists()
    payload = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert payload["iterations"] == 4


def test_config_file_round_trip(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "variant": "b3-tiny", "sensor_width": 64, "sensor_height": 64,
        "dt_us": 5000, "down_write": True, "event_gate": False, "seed": 4,
    }))
    out = tmp_path / "tr"
    assert run_cli(["trace", "--config", cfg_path, "--steps", "6", "--out", out]) == 0
    cfg = ModelConfig.from_json((out / "resolved_config.json").read_text())
    assert cfg.event_gate is False and cfg.seed == 4


def test_hmnet_threads_caps_workers(tmp_path, monkeypatch):
    monkeypatch.setenv("HMNET_THREADS", "1")
    ev = tmp_path / "s.hmev"
    run_cli(["gen", "--events", ev, "--width", "64", "--height", "64",
             "--duration-ms", "30", "--seed", "1"])
    out = tmp_path / "run"
    assert run_cli(["run", "--events", ev, "--variant", "b3-tiny", "--out", out,
                    "--workers", "3", "--steps", "4"]) == 0
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["workers"] == 1


def test_console_entry_point(tmp_path):
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "hmnet.cli", "trace",
                           "--variant", "b1-tiny", "--width", "32", "--height", "32",
                           "--steps", "3"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "step,level,action"


def test_gen_frames_for_fusion(tmp_path):
    ev = tmp_path / "s.hmev"
    assert run_cli(["gen", "--events", ev, "--width", "64", "--height", "64",
                    "--duration-ms", "100", "--seed", "1",
                    "--frames-out", tmp_path / "frames.npz"]) == 0
    frames = np.load(tmp_path / "frames.npz")["frames"]
    assert frames.shape[1:] == (64, 64, 3)
    # enough frames for a 45 ms cadence over 100 ms
    assert frames.shape[0] >= 3
    out = tmp_path / "run"
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "variant": "b3-tiny", "sensor_width": 64, "sensor_height": 64,
        "fusion": True,
    }))
    assert run_cli(["run", "--events", ev, "--config", cfg_path, "--out", out,
                    "--frames", tmp_path / "frames.npz", "--steps", "18"]) == 0

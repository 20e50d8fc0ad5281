"""Desk-scale training demo: regress the synthetic bar speed from pooled
readouts, backpropagating through the recorded schedule tape.

The head is deliberately minimal (global average of each level's readout,
concatenated, then one affine to a scalar) so the only thing being exercised
is the memory pipeline itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, HmnetError
from .events import SceneParams, MovingObject, generate_synthetic_stream, slice_stream
from .executor import backward_tape, run_sequential
from .model import Model, ModelConfig, build_model
from .params import ParameterStore

HEAD_W, HEAD_B = "head.w", "head.b"


def add_head_params(model: Model) -> None:
    d_total = sum(model.config.dims)
    if HEAD_W not in model.store:
        model.store.add(HEAD_W, np.zeros((d_total, 1), model.config.dtype))
        model.store.add(HEAD_B, np.zeros(1, model.config.dtype))


def head_forward(model: Model, views) -> np.ndarray:
    """Per-step scalar predictions from the latent buffers (steps >= 1)."""
    preds = []
    for view in views:
        if view.step == 0:
            continue
        pooled = np.concatenate([view.readouts[l].data.mean(axis=(0, 1))
                                 for l in sorted(view.readouts)])
        preds.append(float(pooled @ model.store[HEAD_W][:, 0] + model.store[HEAD_B][0]))
    return np.asarray(preds)


def sequence_loss(model: Model, slices, target: float, images=None,
                  record: bool = False):
    """Mean squared error of per-step speed predictions over one sequence.

    Returns (loss, d_readouts, tape): with ``record`` the gradient hooks for
    :func:`backward_tape` plus head-parameter gradients are produced."""
    res = run_sequential(model, slices, images=images, record=record)
    store = model.store
    dims = model.config.dims
    n_steps = len(slices)
    loss = 0.0
    d_readouts: dict[tuple[int, int], np.ndarray] = {}
    for view in res.views:
        if view.step == 0:
            continue
        pooled = np.concatenate([view.readouts[l].data.mean(axis=(0, 1))
                                 for l in sorted(view.readouts)])
        pred = float(pooled @ store[HEAD_W][:, 0] + store[HEAD_B][0])
        err = pred - target
        loss += err * err / n_steps
        if record:
            d_pred = 2.0 * err / n_steps
            store.accumulate(HEAD_W, pooled[:, None] * d_pred)
            store.accumulate(HEAD_B, np.array([d_pred], dtype=pooled.dtype))
            d_pooled = (store[HEAD_W][:, 0] * d_pred)
            off = 0
            for l in sorted(view.readouts):
                ro = view.readouts[l]
                d_l = d_pooled[off:off + dims[l - 1]]
                off += dims[l - 1]
                cells = ro.data.shape[0] * ro.data.shape[1]
                d_grid = np.broadcast_to(d_l / cells, ro.data.shape)
                key = (l, ro.step)
                if key in d_readouts:
                    d_readouts[key] = d_readouts[key] + d_grid
                else:
                    d_readouts[key] = d_grid.copy()
    return loss, d_readouts, (res.tape if record else None)


class Adam:
    """Adam with the usual bias correction; operates on a ParameterStore."""

    def __init__(self, store: ParameterStore, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.value) for n, p in store.params.items() if p.trainable}
        self.v = {n: np.zeros_like(p.value) for n, p in store.params.items() if p.trainable}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name in self.m:
            g = self.store.grad(name)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            self.store.params[name].value = (
                self.store[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps))


@dataclass
class DemoScene:
    slices: list
    target: float  # bar speed, px/ms


def make_demo_scenes(config: ModelConfig, seed: int, n_steps: int = 6,
                     speeds=(0.3, 0.6, 0.9, 1.2), noise_rate: float = 2.0):
    """Bars sweeping right at distinct speeds; target is speed in px/ms."""
    scenes = []
    w, h = config.sensor_width, config.sensor_height
    duration_ms = n_steps * config.dt_us // 1000
    for i, v in enumerate(speeds):
        scene = SceneParams(w, h, duration_ms,
                            (MovingObject(1.0, 0.0, 2.0, float(h), v * 1000.0, 0.0),))
        stream, _ = generate_synthetic_stream(scene, noise_rate, seed=seed + i)
        slices = slice_stream(stream, config.dt_us)[:n_steps]
        if len(slices) < n_steps:
            raise HmnetError("scene too short for the requested steps")
        scenes.append(DemoScene(slices, float(v)))
    return scenes


@dataclass
class TrainResult:
    losses: list[float]
    smoothed: list[float]
    initial_smoothed: float
    final_smoothed: float
    model: Model = field(repr=False)

    def write_curve(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "smoothed"])
            for i, (lo, sm) in enumerate(zip(self.losses, self.smoothed)):
                writer.writerow([i, f"{lo:.8f}", f"{sm:.8f}"])


def train_demo(config: ModelConfig, iterations: int, lr: float,
               smooth_window: int = 25) -> TrainResult:
    """Train the tiny variant on the synthetic speed-regression task.
    Deterministic for a fixed config seed; aborts on divergence."""
    if max(config.dims) > 32:
        raise ConfigError("train demo expects tiny dims (D <= 32)")
    if config.sensor_width > 32 or config.sensor_height > 32:
        raise ConfigError("train demo expects a sensor up to 32x32")
    model = build_model(config)
    add_head_params(model)
    scenes = make_demo_scenes(config, seed=config.seed)
    opt = Adam(model.store, lr)
    losses: list[float] = []
    smoothed: list[float] = []
    for it in range(iterations):
        scene = scenes[it % len(scenes)]
        model.store.zero_grads()
        loss, d_readouts, tape = sequence_loss(model, scene.slices, scene.target,
                                               record=True)
        if not np.isfinite(loss):
            raise HmnetError(f"training diverged at iteration {it}: loss={loss}")
        backward_tape(model, tape, d_readouts)
        opt.step()
        losses.append(loss)
        lo = max(0, len(losses) - smooth_window)
        smoothed.append(float(np.mean(losses[lo:])))
    init_sm = float(np.mean(losses[:smooth_window])) if losses else 0.0
    return TrainResult(losses, smoothed, init_sm,
                       smoothed[-1] if smoothed else 0.0, model)

"""Analytic multiply-accumulate cost model.

Counts exactly what the instrumented executors count: matmul-like MACs of
affines, convolutions, attention score/value products, and bilinear
interpolation (4 MACs per output element). Normalizations, activations,
softmax and plain adds are excluded on both sides, so predictions match the
instrumented counters bit-for-bit for shape-static actions. The event write
additionally depends on the slice (active cells A, events E) and is exact
once those counts are supplied.
"""

from __future__ import annotations

from dataclasses import dataclass

from .memory import PATCH, RESIDUAL_LAYERS
from .model import ModelConfig
from .schedule import (EVENT_WRITE, IMAGE_WRITE, MAKE_DOWN_MESSAGE, READOUT,
                       UP_WRITE, UPDATE, ScheduleTrace, compile_schedule)
from .wmca import TILE


def affine_macs(n: int, din: int, dout: int) -> int:
    return n * din * dout


def conv_macs(h: int, w: int, k: int, din: int, dout: int, stride: int) -> int:
    ho, wo = -(-h // stride), -(-w // stride)
    return ho * wo * k * k * din * dout


def _n_tiles(h: int, w: int) -> int:
    return (-(-h // TILE)) * (-(-w // TILE))


def attention_macs(h: int, w: int, d_inner: int) -> int:
    """Tiled attention score + value products at spatial dims (h, w)."""
    return 2 * _n_tiles(h, w) * (TILE * TILE) ** 2 * d_inner


def _wmca_macs(h, w, d_q, d_kv, d_out):
    """q/k/v and out projections plus tile attention at (h, w)."""
    n = h * w
    return (affine_macs(n, d_q, d_q) + 2 * affine_macs(n, d_kv, d_q)
            + attention_macs(h, w, d_q) + affine_macs(n, d_q, d_out))


def _mlp_macs(h, w, d):
    return 2 * affine_macs(h * w, d, d)


def event_write_macs(config: ModelConfig, n_active_cells: int, n_events: int) -> int:
    """ESCA cost as a function of active-cell and event counts."""
    if n_events == 0:
        return 0
    d = config.dims[0]
    e, a = n_events, n_active_cells
    total = 0
    for din, dout in ((1, d // 4), (2, d // 2), (2, d // 4)):
        total += affine_macs(e, din, dout) + affine_macs(e, dout, dout)
    total += 2 * affine_macs(e, d, d)          # k, v maps
    total += affine_macs(a, d, d)              # q map
    total += 2 * e * d                         # gated attention scores + values
    total += affine_macs(a, d, d)              # output projection
    total += 2 * affine_macs(a, d, d)          # post-write MLP
    return total


def up_write_macs(config: ModelConfig, level: int) -> int:
    hs, ws = config.grid_dims(level - 1)
    h, w = config.grid_dims(level)
    d_prev, d = config.dims[level - 2], config.dims[level - 1]
    return (conv_macs(hs, ws, 3, d_prev, d, 2)
            + _wmca_macs(h, w, d, d, d) + _mlp_macs(h, w, d))


def down_message_macs(config: ModelConfig, target_level: int) -> int:
    lo, hi = target_level, target_level + 1
    h_lo, w_lo = config.grid_dims(lo)
    h_hi, w_hi = config.grid_dims(hi)
    d_lo, d_hi = config.dims[lo - 1], config.dims[hi - 1]
    return (conv_macs(h_lo, w_lo, 3, d_lo, d_hi, 2)
            + _wmca_macs(h_hi, w_hi, d_hi, d_hi, d_lo)
            + 4 * (2 * h_hi) * (2 * w_hi) * d_lo        # bilinear upsample
            + _mlp_macs(h_lo, w_lo, d_lo))


def update_macs(config: ModelConfig, level: int) -> int:
    h, w = config.grid_dims(level)
    d = config.dims[level - 1]
    return RESIDUAL_LAYERS[level - 1] * 2 * conv_macs(h, w, 3, d, d, 1)


def readout_macs(config: ModelConfig, level: int) -> int:
    h, w = config.grid_dims(level)
    d = config.dims[level - 1]
    return conv_macs(h, w, 1, d, d, 1)


def image_write_macs(config: ModelConfig) -> int:
    top = config.levels
    h, w = config.grid_dims(top)
    d = config.dims[top - 1]
    return (affine_macs(h * w, PATCH * PATCH * 3, d)
            + _wmca_macs(h, w, d, d, d) + _mlp_macs(h, w, d))


def action_macs(config: ModelConfig, level: int, action: str,
                n_active_cells: int | None = None, n_events: int | None = None) -> int:
    """Closed-form MACs of one scheduled action. Event writes need the
    slice's active-cell/event counts; everything else is shape-static."""
    if action == EVENT_WRITE:
        if n_active_cells is None or n_events is None:
            raise ValueError("event_write cost needs active-cell and event counts")
        return event_write_macs(config, n_active_cells, n_events)
    if action == UP_WRITE:
        return up_write_macs(config, level)
    if action == MAKE_DOWN_MESSAGE:
        return down_message_macs(config, level - 1)
    if action == UPDATE:
        return update_macs(config, level)
    if action == READOUT:
        return readout_macs(config, level)
    if action == IMAGE_WRITE:
        return image_write_macs(config)
    return 0  # down_apply (pure add) and snapshots cost no MACs


@dataclass
class StepCost:
    step: int
    per_action: list[tuple[int, str, int]]  # (level, action, macs)

    @property
    def total(self) -> int:
        return sum(m for _, _, m in self.per_action)


def count_macs(config: ModelConfig, step: int,
               event_counts: tuple[int, int] | None = None,
               trace: ScheduleTrace | None = None) -> StepCost:
    """Predicted MACs for every action of one step. ``event_counts`` is
    (active_cells, events) of that step's slice; omitted -> counted as 0."""
    if trace is None:
        trace = compile_schedule(config, max(step, 1))
    per_action = []
    for e in trace.at_step(step):
        if e.action == EVENT_WRITE:
            a, n = event_counts if event_counts is not None else (0, 0)
            macs = event_write_macs(config, a, n)
        else:
            macs = action_macs(config, e.level, e.action)
        per_action.append((e.level, e.action, macs))
    return StepCost(step, per_action)


def amortized_step_macs(config: ModelConfig, n_steps: int,
                        event_counts: list[tuple[int, int]] | None = None) -> float:
    """Mean per-step MACs over a horizon (event writes by supplied counts)."""
    trace = compile_schedule(config, n_steps)
    total = 0
    for n in range(1, n_steps + 1):
        counts = event_counts[n - 1] if event_counts else (0, 0)
        total += count_macs(config, n, counts, trace).total
    return total / n_steps

"""Finite-difference gradient verification harness.

``numeric_gradient`` is full per-coordinate central differences. For large
tensors (and the end-to-end unroll) ``gradient_report`` can check a seeded
random subset of coordinates per parameter, which keeps the whole harness
inside its time budget without losing sensitivity; ``max_coords=None``
checks everything.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import HmnetError
from .params import ParameterStore

DEFAULT_H = 1e-5
REL_FLOOR = 1e-6


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    passed: bool


@dataclass
class GradReport:
    op: str
    seed: int
    tolerance: float
    dims: str
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    def rows(self):
        for c in self.checks:
            yield {"op": self.op, "param": c.name, "max_rel_err": f"{c.max_rel_err:.3e}",
                   "pass": str(c.passed).lower()}


def numeric_gradient(loss_fn: Callable[[], float], arrays: list[np.ndarray], h: float = DEFAULT_H):
    """Central differences (f(x+h) - f(x-h)) / 2h per coordinate of each
    array, mutating the arrays in place around each evaluation."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn()
            flat[i] = orig - h
            fm = loss_fn()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise HmnetError("non-finite loss during finite differencing")
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def _numeric_at_coords(loss_fn, arr, coords, h):
    out = np.zeros(len(coords), dtype=np.float64)
    flat = arr.reshape(-1)
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise HmnetError("non-finite loss during finite differencing")
        out[n] = (fp - fm) / (2.0 * h)
    return out


def compare_store_gradients(
    op_name: str,
    loss_fn: Callable[[], float],
    analytic_fn: Callable[[], None],
    store: ParameterStore,
    names: list[str],
    tolerance: float,
    seed: int = 0,
    dims: str = "",
    h: float = DEFAULT_H,
    max_coords: int | None = None,
) -> GradReport:
    """Run ``analytic_fn`` once (filling ``store`` grads), then compare each
    named parameter's analytic gradient against central differences of
    ``loss_fn``. Relative error divides by max(|numeric|, 1e-6)."""
    store.zero_grads()
    analytic_fn()
    rng = np.random.default_rng(seed ^ 0x5EED)
    report = GradReport(op_name, seed, tolerance, dims)
    for name in names:
        value = store[name]
        analytic = store.grad(name).reshape(-1)
        size = value.size
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, size=max_coords, replace=False)
        else:
            coords = np.arange(size)
        numeric = _numeric_at_coords(loss_fn, value, coords, h)
        diff = np.abs(analytic[coords] - numeric)
        rel = diff / np.maximum(np.abs(numeric), REL_FLOOR)
        max_rel = float(rel.max()) if len(coords) else 0.0
        max_abs = float(diff.max()) if len(coords) else 0.0
        report.checks.append(ParamCheck(name, max_rel, max_abs, len(coords), max_rel < tolerance))
    return report


def write_report_csv(path, reports: list[GradReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["op", "param", "max_rel_err", "pass"])
        writer.writeheader()
        for rep in reports:
            for row in rep.rows():
                writer.writerow(row)

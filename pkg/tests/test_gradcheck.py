import time

import numpy as np
import pytest

from hmnet import checks
from hmnet.errors import ConfigError, HmnetError
from hmnet.gradcheck import (GradReport, compare_store_gradients,
                             numeric_gradient, write_report_csv)
from hmnet.params import ParameterStore


# ---------------------------------------------------------------------------
# numeric_gradient contract


def test_square_function():
    x = np.array([3.0])
    (g,) = numeric_gradient(lambda: float(x[0] ** 2), [x])
    assert abs(g[0] - 6.0) < 1e-9


def test_constant_function():
    x = np.array([1.0, -2.0, 0.5])
    (g,) = numeric_gradient(lambda: 42.0, [x])
    assert np.abs(g).max() < 1e-10


def test_quadratic_form_matches_2Ax():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5))
    a = (a + a.T) / 2
    x = rng.normal(size=5)
    (g,) = numeric_gradient(lambda: float(x @ a @ x), [x])
    assert np.abs(g - 2 * a @ x).max() < 1e-7


def test_non_finite_loss_raises():
    x = np.array([0.0])
    with pytest.raises(HmnetError):
        numeric_gradient(lambda: float("nan"), [x])


# ---------------------------------------------------------------------------
# harness behavior


def test_corrupted_backward_fails():
    store = ParameterStore()
    rng = np.random.default_rng(1)
    store.add("w", rng.normal(size=4))

    def loss():
        return float((store["w"] ** 2).sum())

    def analytic_bad():
        store.accumulate("w", -2.0 * store["w"])  # sign flipped

    report = compare_store_gradients("bad", loss, analytic_bad, store, ["w"], 1e-4)
    assert not report.passed


def test_report_csv(tmp_path):
    rep = checks.gradient_report("affine", seed=0)
    path = tmp_path / "report.csv"
    write_report_csv(path, [rep])
    lines = path.read_text().splitlines()
    assert lines[0] == "op,param,max_rel_err,pass"
    assert len(lines) == 1 + len(rep.checks)
    assert all(line.endswith("true") for line in lines[1:])


def test_unknown_op_rejected():
    with pytest.raises(ConfigError):
        checks.gradient_report("nonsense")


# ---------------------------------------------------------------------------
# registry coverage (two seeds here; the acceptance suite runs ten)


@pytest.mark.parametrize("op", checks.PRIMITIVES)
def test_primitives_pass_at_1e6(op):
    for seed in (0, 1):
        rep = checks.gradient_report(op, seed=seed)
        assert rep.tolerance == 1e-6
        assert rep.passed, f"{op} seed {seed}: {rep.max_rel_err:.3e}"


@pytest.mark.parametrize("op", checks.COMPOSITES)
def test_composites_pass_at_1e4(op):
    for seed in (0, 1):
        rep = checks.gradient_report(op, seed=seed)
        assert rep.tolerance == 1e-4
        assert rep.passed, f"{op} seed {seed}: " + str(
            [(c.name, f"{c.max_rel_err:.2e}") for c in rep.checks if not c.passed])

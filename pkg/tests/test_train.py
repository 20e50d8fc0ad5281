import numpy as np
import pytest

from hmnet import train
from hmnet.errors import ConfigError, HmnetError
from hmnet.gradcheck import compare_store_gradients
from hmnet.model import build_model, variant_config


def tiny_b1(seed=0, **over):
    cfg = variant_config("b1-tiny", 16, 16, dims=(8,), heads=(2,), seed=seed, **over)
    model = build_model(cfg, init_scale=0.1)
    train.add_head_params(model)
    rng = np.random.default_rng(seed)
    model.store.params["head.w"].value = rng.normal(size=(8, 1)) * 0.3
    # nonzero initial state: finite differences at the zero-variance LN
    # point would otherwise be truncation-limited, not gradient-limited
    model.store.params["mem1.init.v"].value = rng.normal(size=8) * 0.3
    return model


def tiny_b3(seed=0, **over):
    cfg = variant_config("b3-tiny", 32, 32, dims=(8, 8, 8), heads=(2, 2, 2),
                         seed=seed, **over)
    model = build_model(cfg, init_scale=0.1)
    train.add_head_params(model)
    rng = np.random.default_rng(seed)
    model.store.params["head.w"].value = rng.normal(size=(24, 1)) * 0.3
    for l in (1, 2, 3):
        model.store.params[f"mem{l}.init.v"].value = rng.normal(size=8) * 0.3
    return model


def demo_slices(model, n_steps, seed=0):
    scenes = train.make_demo_scenes(model.config, seed=seed, n_steps=n_steps)
    return scenes[0].slices, scenes[0].target


def test_unroll_gradcheck_b1_three_steps():
    model = tiny_b1(1)
    slices, target = demo_slices(model, 3, seed=1)
    store = model.store

    def loss():
        lo, _, _ = train.sequence_loss(model, slices, target)
        return lo

    def analytic():
        lo, d_readouts, tape = train.sequence_loss(model, slices, target, record=True)
        from hmnet.executor import backward_tape
        backward_tape(model, tape, d_readouts)

    names = [n for n in store.names()]
    report = compare_store_gradients("b1_unroll", loss, analytic, store, names,
                                     tolerance=1e-4, seed=1, max_coords=6)
    assert report.passed, [f"{c.name}: {c.max_rel_err:.2e}" for c in report.checks
                           if not c.passed]


def test_unroll_gradcheck_b3_with_transfers():
    # 10 steps exercise up-writes, down messages/applies and snapshots.
    # Upper-level init coordinates are excluded: spatially-constant initial
    # states put GroupNorm at var=0 where both finite differences and float
    # reverse-mode are eps-conditioned; level 1 is non-degenerate because
    # events break constancy at step 1.
    model = tiny_b3(2)
    slices, target = demo_slices(model, 10, seed=2)
    store = model.store

    def loss():
        lo, _, _ = train.sequence_loss(model, slices, target)
        return lo

    def analytic():
        lo, d_readouts, tape = train.sequence_loss(model, slices, target, record=True)
        from hmnet.executor import backward_tape
        backward_tape(model, tape, d_readouts)

    names = ["head.w", "mem1.init.v", "esca.q.w", "esca.gate.w",
             "mem2.gdown.conv.w", "wmca.up2.q.w", "wmca.down1.q.w",
             "mem1.down.gdown.conv.w", "mem1.update.block1.conv1.w",
             "mem1.readout.conv.w"]
    report = compare_store_gradients("b3_unroll", loss, analytic, store, names,
                                     tolerance=5e-4, seed=2, max_coords=4)
    assert report.passed, [f"{c.name}: {c.max_rel_err:.2e}" for c in report.checks
                           if not c.passed]


def test_adam_matches_reference_formula():
    from hmnet.params import ParameterStore
    store = ParameterStore()
    store.add("p", np.array([1.0, -2.0]))
    opt = train.Adam(store, lr=0.1)
    g = np.array([0.5, -1.5])
    store.accumulate("p", g)
    opt.step()
    m = 0.1 * g
    v = 0.001 * g * g
    mhat = m / (1 - 0.9)
    vhat = v / (1 - 0.999)
    ref = np.array([1.0, -2.0]) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    assert np.abs(store["p"] - ref).max() < 1e-12


def test_zero_learning_rate_constant_loss():
    cfg = variant_config("b1-tiny", 32, 32, seed=4)
    res = train.train_demo(cfg, iterations=8, lr=0.0)
    assert np.ptp(np.asarray(res.losses)[::4]) < 1e-12  # same scene -> same loss


def test_train_demo_deterministic():
    cfg = variant_config("b1-tiny", 32, 32, seed=5)
    a = train.train_demo(cfg, iterations=6, lr=3e-3)
    b = train.train_demo(cfg, iterations=6, lr=3e-3)
    assert a.losses == b.losses


def test_train_demo_rejects_large_dims():
    cfg = variant_config("b1", 64, 64)
    with pytest.raises(ConfigError):
        train.train_demo(cfg, iterations=1, lr=1e-3)


def test_train_demo_loss_decreases_quickly():
    cfg = variant_config("b1-tiny", 32, 32, seed=6)
    res = train.train_demo(cfg, iterations=60, lr=5e-3)
    assert res.final_smoothed < res.initial_smoothed


def test_loss_curve_csv(tmp_path):
    cfg = variant_config("b1-tiny", 32, 32, seed=7)
    res = train.train_demo(cfg, iterations=4, lr=1e-3)
    path = tmp_path / "curve.csv"
    res.write_curve(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,loss,smoothed"
    assert len(lines) == 5

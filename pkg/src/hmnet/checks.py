"""Registry of seeded gradient-check instances: every differentiable
primitive at 1e-6, every composite (and a 3-step end-to-end unroll of the
single-level tiny variant) at 1e-4.

Each instance gets a fresh store per seed; probe losses are O(1)-scaled
projections so finite-difference roundoff stays below the relative-error
floor. Large tensors are checked on a seeded coordinate subset (full
coverage where cheap); ``numeric_gradient`` itself stays per-coordinate.
"""

from __future__ import annotations

import numpy as np

from . import esca as esca_mod
from . import memory, ops, train
from . import wmca as wmca_mod
from .errors import ConfigError
from .events import EventSlice
from .gradcheck import GradReport, compare_store_gradients
from .model import build_model, variant_config
from .params import ParameterStore

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4


def _proj(rng, shape):
    arr = rng.normal(size=shape)
    return arr / arr.size


def _random_slice(rng, n, width, height, dt=5000):
    t = np.sort(rng.integers(1, dt + 1, n).astype(np.uint64))
    return EventSlice(0, dt, t,
                      rng.integers(0, width, n).astype(np.uint16),
                      rng.integers(0, height, n).astype(np.uint16),
                      (rng.integers(0, 2, n) * 2 - 1).astype(np.int8))


# each builder returns (store, names, loss_fn, analytic_fn, dims)

def _build_affine(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(4, 3)))
    store.add("w", rng.normal(size=(3, 2)))
    store.add("b", rng.normal(size=2))
    proj = _proj(rng, (4, 2))

    def loss():
        return float((ops.affine_fwd(store["x"], store["w"], store["b"])[0] * proj).sum())

    def analytic():
        _, cache = ops.affine_fwd(store["x"], store["w"], store["b"])
        dx, dw, db = ops.affine_bwd(cache, proj)
        store.accumulate("x", dx); store.accumulate("w", dw); store.accumulate("b", db)

    return store, ["x", "w", "b"], loss, analytic, "4x3 @ 3x2"


def _build_layer_norm(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(3, 5)) * 2)
    store.add("g", rng.normal(size=5))
    store.add("b", rng.normal(size=5))
    proj = _proj(rng, (3, 5))

    def loss():
        return float((ops.layer_norm_fwd(store["x"], store["g"], store["b"])[0] * proj).sum())

    def analytic():
        _, cache = ops.layer_norm_fwd(store["x"], store["g"], store["b"])
        dx, dg, db = ops.layer_norm_bwd(cache, proj)
        store.accumulate("x", dx); store.accumulate("g", dg); store.accumulate("b", db)

    return store, ["x", "g", "b"], loss, analytic, "3x5"


def _build_group_norm(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(3, 4, 8)))
    store.add("g", rng.normal(size=8))
    store.add("b", rng.normal(size=8))
    proj = _proj(rng, (3, 4, 8))

    def loss():
        return float((ops.group_norm_fwd(store["x"], 4, store["g"], store["b"])[0] * proj).sum())

    def analytic():
        _, cache = ops.group_norm_fwd(store["x"], 4, store["g"], store["b"])
        dx, dg, db = ops.group_norm_bwd(cache, proj)
        store.accumulate("x", dx); store.accumulate("g", dg); store.accumulate("b", db)

    return store, ["x", "g", "b"], loss, analytic, "3x4x8 G=4"


def _build_activation(kind):
    def build(seed):
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        store.add("x", rng.normal(size=17) * 2)
        proj = _proj(rng, 17)

        def loss():
            return float((ops.activation_fwd(store["x"], kind)[0] * proj).sum())

        def analytic():
            _, cache = ops.activation_fwd(store["x"], kind)
            store.accumulate("x", ops.activation_bwd(kind, cache, proj))

        return store, ["x"], loss, analytic, "17"
    return build


def _build_conv(k, stride):
    def build(seed):
        rng = np.random.default_rng(seed)
        store = ParameterStore()
        store.add("x", rng.normal(size=(5, 4, 3)))
        store.add("w", rng.normal(size=(k, k, 3, 2)))
        store.add("b", rng.normal(size=2))
        ho, wo = -(-5 // stride), -(-4 // stride)
        proj = _proj(rng, (ho, wo, 2))

        def loss():
            return float((ops.conv2d_fwd(store["x"], store["w"], store["b"], stride)[0] * proj).sum())

        def analytic():
            _, cache = ops.conv2d_fwd(store["x"], store["w"], store["b"], stride)
            dx, dw, db = ops.conv2d_bwd(cache, proj)
            store.accumulate("x", dx); store.accumulate("w", dw); store.accumulate("b", db)

        return store, ["x", "w", "b"], loss, analytic, f"5x4x3 k{k} s{stride}"
    return build


def _build_upsample(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(3, 2, 2)))
    proj = _proj(rng, (6, 4, 2))

    def loss():
        return float((ops.upsample2_fwd(store["x"])[0] * proj).sum())

    def analytic():
        _, cache = ops.upsample2_fwd(store["x"])
        store.accumulate("x", ops.upsample2_bwd(cache, proj))

    return store, ["x"], loss, analytic, "3x2x2 -> 6x4x2"


def _build_softmax(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(4, 5)) * 3)
    proj = _proj(rng, (4, 5))

    def loss():
        return float((ops.softmax_fwd(store["x"])[0] * proj).sum())

    def analytic():
        _, cache = ops.softmax_fwd(store["x"])
        store.accumulate("x", ops.softmax_bwd(cache, proj))

    return store, ["x"], loss, analytic, "4x5"


def _build_residual_block(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("x", rng.normal(size=(4, 4, 8)))
    store.add("gn1.g", np.ones(8)); store.add("gn1.b", np.zeros(8))
    store.add("conv1.w", rng.normal(size=(3, 3, 8, 8)) * 0.15)
    store.add("conv1.b", np.zeros(8))
    store.add("gn2.g", np.ones(8)); store.add("gn2.b", np.zeros(8))
    store.add("conv2.w", rng.normal(size=(3, 3, 8, 8)) * 0.15)
    store.add("conv2.b", np.zeros(8))
    proj = _proj(rng, (4, 4, 8))

    def params():
        return {k: store[k] for k in ops.RESIDUAL_PARAM_KEYS}

    def loss():
        return float((ops.residual_block_fwd(store["x"], params())[0] * proj).sum())

    def analytic():
        _, cache = ops.residual_block_fwd(store["x"], params())
        dx, grads = ops.residual_block_bwd(cache, proj)
        store.accumulate("x", dx)
        for k, g in grads.items():
            store.accumulate(k, g)

    return store, ["x"] + list(ops.RESIDUAL_PARAM_KEYS), loss, analytic, "4x4x8"


def _build_esca(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    esca_mod.init_esca_params(store, 8, 2, rng, scale=0.2)
    store["esca.gate.w"] = rng.normal(size=2) * 0.5
    store.add("z", rng.normal(size=(2, 2, 8)))
    sl = _random_slice(rng, 12, 8, 8)
    from .events import build_window_index
    win = build_window_index(sl, 4, (2, 2))
    proj = _proj(rng, (2, 2, 8))

    def loss():
        out, _ = esca_mod.esca_attend_fwd(store["z"], win, sl, store.subset("esca"), 2)
        return float((out * proj).sum())

    def analytic():
        _, cache = esca_mod.esca_attend_fwd(store["z"], win, sl, store.subset("esca"), 2)
        dz, grads = esca_mod.esca_attend_bwd(cache, proj)
        store.accumulate_prefixed("esca", grads)
        store.accumulate("z", dz)

    return store, store.names(), loss, analytic, "2x2 cells, 12 events, D=8 H=2"


def _build_wmca(seed):
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    wmca_mod.init_wmca_params(store, "w", 8, 8, 2, rng, scale=0.25)
    store["w.bias.table"] = rng.normal(size=(2, 169)) * 0.1
    store.add("x1", rng.normal(size=(7, 7, 8)))
    store.add("x2", rng.normal(size=(7, 7, 8)))
    proj = _proj(rng, (7, 7, 8))

    def loss():
        y, _ = wmca_mod.wmca_attend_fwd(store["x1"], store["x2"], store.subset("w"), 2)
        return float((y * proj).sum())

    def analytic():
        _, cache = wmca_mod.wmca_attend_fwd(store["x1"], store["x2"], store.subset("w"), 2)
        dx1, dx2, grads = wmca_mod.wmca_attend_bwd(cache, proj)
        store.accumulate_prefixed("w", grads)
        store.accumulate("x1", dx1)
        store.accumulate("x2", dx2)

    names = [n for n in store.names() if not n.startswith("w.mlp")]
    return store, names, loss, analytic, "7x7x8 H=2"


def _tiny_pair_model(seed):
    cfg = variant_config("b3-tiny", 32, 32, dims=(8, 8, 8), heads=(2, 2, 2), seed=seed)
    model = build_model(cfg, init_scale=0.15)
    rng = np.random.default_rng(seed)
    return model, rng


def _build_up_write(seed):
    model, rng = _tiny_pair_model(seed)
    store = model.store
    store.add("zlo", rng.normal(size=(8, 8, 8)))
    store.add("zhi", rng.normal(size=(4, 4, 8)))
    proj = _proj(rng, (4, 4, 8))

    def run():
        st = memory.MemoryState(2, store["zhi"], 8, 3)
        return memory.up_write_fwd(st, store["zlo"], store, heads=2)

    def loss():
        out, _ = run()
        return float((out.grid * proj).sum())

    def analytic():
        _, cache = run()
        dz, dsnap = memory.up_write_bwd(cache, proj, store)
        store.accumulate("zhi", dz)
        store.accumulate("zlo", dsnap)

    names = ["zlo", "zhi"] + [n for n in store.names()
                              if n.startswith(("mem2.gdown", "wmca.up2"))]
    return store, names, loss, analytic, "8x8x8 -> 4x4x8"


def _build_down_write(seed):
    model, rng = _tiny_pair_model(seed)
    store = model.store
    store.add("zlo", rng.normal(size=(8, 8, 8)))
    store.add("zhi", rng.normal(size=(4, 4, 8)))
    proj = _proj(rng, (8, 8, 8))

    def run():
        st_hi = memory.MemoryState(2, store["zhi"], 8, 3)
        msg, cache = memory.down_write_make_message_fwd(st_hi, store["zlo"], 0, store, 2)
        return store["zlo"] + msg.delta, cache

    def loss():
        out, _ = run()
        return float((out * proj).sum())

    def analytic():
        _, cache = run()
        d_applied, d_delta = memory.down_write_apply_bwd(proj)
        d_hi, d_snap = memory.down_write_make_message_bwd(cache, d_delta, store)
        store.accumulate("zhi", d_hi)
        store.accumulate("zlo", d_snap + d_applied)

    names = ["zlo", "zhi"] + [n for n in store.names()
                              if n.startswith(("mem1.down", "wmca.down1"))]
    return store, names, loss, analytic, "hi 4x4x8 -> lo 8x8x8"


def _build_update(seed):
    cfg = variant_config("b1-tiny", 16, 16, dims=(8,), heads=(2,), seed=seed)
    model = build_model(cfg, init_scale=0.15)
    rng = np.random.default_rng(seed)
    store = model.store
    store.add("z", rng.normal(size=(4, 4, 8)))
    proj = _proj(rng, (4, 4, 8))

    def loss():
        st = memory.MemoryState(1, store["z"], 4, 1)
        out, _ = memory.update_state_fwd(st, store)
        return float((out.grid * proj).sum())

    def analytic():
        st = memory.MemoryState(1, store["z"], 4, 1)
        _, cache = memory.update_state_fwd(st, store)
        store.accumulate("z", memory.update_state_bwd(cache, proj, store))

    names = ["z"] + [n for n in store.names() if n.startswith("mem1.update")]
    return store, names, loss, analytic, "4x4x8, 1 block"


def _build_readout(seed):
    cfg = variant_config("b1-tiny", 16, 16, dims=(8,), heads=(2,), seed=seed)
    model = build_model(cfg, init_scale=0.15)
    rng = np.random.default_rng(seed)
    store = model.store
    store.add("z", rng.normal(size=(4, 4, 8)))
    proj = _proj(rng, (4, 4, 8))

    def loss():
        st = memory.MemoryState(1, store["z"], 4, 1)
        ro, _ = memory.readout_fwd(st, store)
        return float((ro.data * proj).sum())

    def analytic():
        st = memory.MemoryState(1, store["z"], 4, 1)
        _, cache = memory.readout_fwd(st, store)
        store.accumulate("z", memory.readout_bwd(cache, proj, store))

    names = ["z"] + [n for n in store.names() if n.startswith("mem1.readout")]
    return store, names, loss, analytic, "4x4x8"


def _build_image_write(seed):
    cfg = variant_config("b3-tiny", 32, 32, dims=(8, 8, 8), heads=(2, 2, 2),
                         fusion=True, seed=seed)
    model = build_model(cfg, init_scale=0.15)
    rng = np.random.default_rng(seed)
    store = model.store
    store.add("z", rng.normal(size=(2, 2, 8)))
    img = rng.normal(size=(32, 32, 3))
    proj = _proj(rng, (2, 2, 8))

    def loss():
        st = memory.MemoryState(3, store["z"], 16, 9)
        out, _ = memory.image_write_fwd(st, img, store, heads=2)
        return float((out.grid * proj).sum())

    def analytic():
        st = memory.MemoryState(3, store["z"], 16, 9)
        _, cache = memory.image_write_fwd(st, img, store, heads=2)
        store.accumulate("z", memory.image_write_bwd(cache, proj, store))

    names = ["z"] + [n for n in store.names()
                     if n.startswith(("mem3.image", "wmca.image3"))]
    return store, names, loss, analytic, "32x32 image -> 2x2x8"


def _build_unroll_b1(seed):
    cfg = variant_config("b1-tiny", 16, 16, dims=(8,), heads=(2,), seed=seed)
    model = build_model(cfg, init_scale=0.1)
    train.add_head_params(model)
    rng = np.random.default_rng(seed)
    model.store.params["head.w"].value = rng.normal(size=(8, 1)) * 0.3
    model.store.params["mem1.init.v"].value = rng.normal(size=8) * 0.3
    scenes = train.make_demo_scenes(cfg, seed=seed, n_steps=3)
    slices, target = scenes[seed % len(scenes)].slices, scenes[seed % len(scenes)].target

    def loss():
        lo, _, _ = train.sequence_loss(model, slices, target)
        return lo

    def analytic():
        from .executor import backward_tape
        lo, d_readouts, tape = train.sequence_loss(model, slices, target, record=True)
        backward_tape(model, tape, d_readouts)

    return model.store, model.store.names(), loss, analytic, "B1-tiny, 3 steps"


# name -> (builder, tolerance, max_coords)
REGISTRY = {
    "affine": (_build_affine, PRIMITIVE_TOL, None),
    "layer_norm": (_build_layer_norm, PRIMITIVE_TOL, None),
    "group_norm": (_build_group_norm, PRIMITIVE_TOL, None),
    "gelu": (_build_activation("gelu"), PRIMITIVE_TOL, None),
    "silu": (_build_activation("silu"), PRIMITIVE_TOL, None),
    "conv1x1": (_build_conv(1, 1), PRIMITIVE_TOL, None),
    "conv3x3": (_build_conv(3, 1), PRIMITIVE_TOL, None),
    "conv3x3_s2": (_build_conv(3, 2), PRIMITIVE_TOL, None),
    "upsample_bilinear": (_build_upsample, PRIMITIVE_TOL, None),
    "softmax_row": (_build_softmax, PRIMITIVE_TOL, None),
    "residual_block": (_build_residual_block, COMPOSITE_TOL, 48),
    "esca_attend": (_build_esca, COMPOSITE_TOL, 48),
    "wmca_attend": (_build_wmca, COMPOSITE_TOL, 48),
    "up_write": (_build_up_write, COMPOSITE_TOL, 32),
    "down_write_inline": (_build_down_write, COMPOSITE_TOL, 32),
    "update_state": (_build_update, COMPOSITE_TOL, 48),
    "readout": (_build_readout, COMPOSITE_TOL, 48),
    "image_write": (_build_image_write, COMPOSITE_TOL, 32),
    "unroll_b1_tiny": (_build_unroll_b1, COMPOSITE_TOL, 3),
}

PRIMITIVES = [k for k, v in REGISTRY.items() if v[1] == PRIMITIVE_TOL]
COMPOSITES = [k for k, v in REGISTRY.items() if v[1] == COMPOSITE_TOL]


def gradient_report(op_name: str, tolerance: float | None = None, seed: int = 0,
                    max_coords: int | None = -1) -> GradReport:
    """Build the named seeded instance and compare analytic vs numeric
    gradients; ``max_coords=-1`` takes the registry default."""
    try:
        builder, default_tol, default_cap = REGISTRY[op_name]
    except KeyError:
        raise ConfigError(f"unknown gradcheck op {op_name!r}; "
                          f"choose from {sorted(REGISTRY)}") from None
    tol = default_tol if tolerance is None else tolerance
    cap = default_cap if max_coords == -1 else max_coords
    store, names, loss, analytic, dims = builder(seed)
    return compare_store_gradients(op_name, loss, analytic, store, names, tol,
                                   seed=seed, dims=dims, max_coords=cap)


def run_all(seeds: int = 10, ops_filter: list[str] | None = None) -> list[GradReport]:
    names = ops_filter or list(REGISTRY)
    return [gradient_report(name, seed=s) for name in names for s in range(seeds)]

"""Latent memory states and their operations: event-write, up-write,
down-write (message generation + application), update, readout, and the
image write-in for sensor fusion.

States are immutable; every write returns a new state with the version
counter bumped. Cross-level transfers read only snapshots (grid copies) and
DownMessages, never live states: a message's residual can be applied only
while the target state is unchanged since the message was generated, which
the version stamp enforces. That snapshot discipline is what makes the
parallel executor bit-identical to the sequential one.

Each operation has a ``*_bwd`` that accumulates parameter gradients into
the store (canonical order) and returns gradients for its state inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import esca as esca_mod
from . import wmca as wmca_mod
from .errors import ShapeError, StaleMessageError
from .events import EventSlice, build_window_index
from .ops import (affine_bwd, affine_fwd, conv2d_bwd, conv2d_fwd, gelu_bwd,
                  gelu_fwd, group_norm_bwd, group_norm_fwd, layer_norm_bwd,
                  layer_norm_fwd, residual_block_bwd, residual_block_fwd,
                  silu_bwd, silu_fwd, upsample2_bwd, upsample2_fwd)

GN_GROUPS = 8
PATCH = 16
RESIDUAL_LAYERS = (1, 3, 9)


@dataclass(frozen=True)
class MemoryState:
    """One level's latent grid plus its timing/stride geometry."""

    level: int            # 1-based
    grid: np.ndarray      # (Hc, Wc, D)
    stride: int
    cycle: int            # steps per operating cycle
    version: int = 0

    def bumped(self, grid: np.ndarray) -> "MemoryState":
        return replace(self, grid=grid, version=self.version + 1)

    def snapshot(self) -> np.ndarray:
        return self.grid.copy()


@dataclass(frozen=True)
class DownMessage:
    """Additive residual produced on the higher level's worker, applicable
    while the target state still has the stamped version."""

    target_level: int
    delta: np.ndarray
    version: int


@dataclass(frozen=True)
class Readout:
    level: int
    step: int
    data: np.ndarray


# ---------------------------------------------------------------------------
# shared pieces


def _mlp_fwd(x, p):
    """Post-attention residual MLP: x + W2(gelu(W1(LN(x))))."""
    n, c_ln = layer_norm_fwd(x, p["mlp.ln_g"], p["mlp.ln_b"])
    y1, c1 = affine_fwd(n, p["mlp.w1"], p["mlp.b1"])
    a, ca = gelu_fwd(y1)
    y2, c2 = affine_fwd(a, p["mlp.w2"], p["mlp.b2"])
    return x + y2, (c_ln, c1, ca, c2)


def _mlp_bwd(cache, dy, grads):
    c_ln, c1, ca, c2 = cache
    da, grads["mlp.w2"], grads["mlp.b2"] = affine_bwd(c2, dy)
    dy1 = gelu_bwd(ca, da)
    dn, grads["mlp.w1"], grads["mlp.b1"] = affine_bwd(c1, dy1)
    dx, grads["mlp.ln_g"], grads["mlp.ln_b"] = layer_norm_bwd(c_ln, dn)
    return dx + dy


def init_gdown_params(store, prefix, d_in, d_out, rng, scale=0.02, dtype=np.float64):
    store.add(f"{prefix}.conv.w", (rng.normal(size=(3, 3, d_in, d_out)) * scale).astype(dtype))
    store.add(f"{prefix}.conv.b", np.zeros(d_out, dtype))
    store.add(f"{prefix}.gn.g", np.ones(d_out, dtype))
    store.add(f"{prefix}.gn.b", np.zeros(d_out, dtype))


def gdown_fwd(x, store, prefix):
    """Downsampler: conv 3x3 stride 2 -> GroupNorm(8) -> SiLU."""
    p = store.subset(prefix)
    y, c_conv = conv2d_fwd(x, p["conv.w"], p["conv.b"], 2)
    n, c_gn = group_norm_fwd(y, GN_GROUPS, p["gn.g"], p["gn.b"])
    a, c_act = silu_fwd(n)
    return a, (c_conv, c_gn, c_act)


def gdown_bwd(cache, dy, store, prefix):
    c_conv, c_gn, c_act = cache
    dn = silu_bwd(c_act, dy)
    dyy, dg, db = group_norm_bwd(c_gn, dn)
    dx, dw, dbias = conv2d_bwd(c_conv, dyy)
    store.accumulate_prefixed(prefix, {"gn.g": dg, "gn.b": db, "conv.w": dw, "conv.b": dbias})
    return dx


# ---------------------------------------------------------------------------
# event write (level 1)


def event_write_fwd(state: MemoryState, sl: EventSlice, store, heads: int,
                    gate_enabled: bool = True):
    """Write an event slice into the level-1 state via windowed gated
    cross attention; empty slices leave the state bit-identical."""
    if state.level != 1:
        raise ShapeError("event_write targets level 1")
    win = build_window_index(sl, state.stride, state.grid.shape[:2])
    grid, cache = esca_mod.esca_attend_fwd(state.grid, win, sl, store.subset("esca"),
                                           heads, gate_enabled)
    return state.bumped(grid), cache


def event_write_bwd(cache, d_grid, store):
    dz, grads = esca_mod.esca_attend_bwd(cache, d_grid)
    store.accumulate_prefixed("esca", grads)
    return dz


# ---------------------------------------------------------------------------
# up write


def up_write_fwd(state: MemoryState, snapshot: np.ndarray, store, heads: int):
    """z <- MLP(LN(zhat)) + zhat where zhat = W-MCA(z, G_down(snapshot)) + z."""
    l = state.level
    g, c_gd = gdown_fwd(snapshot, store, f"mem{l}.gdown")
    if g.shape[:2] != state.grid.shape[:2]:
        raise ShapeError(f"downsampled snapshot {g.shape[:2]} vs grid {state.grid.shape[:2]}")
    p = store.subset(f"wmca.up{l}")
    attn, c_at = wmca_mod.wmca_attend_fwd(state.grid, g, p, heads)
    z_hat = attn + state.grid
    z_new, c_mlp = _mlp_fwd(z_hat, p)
    return state.bumped(z_new), (l, c_gd, c_at, c_mlp)


def up_write_bwd(cache, d_grid, store):
    """Returns (d_state_grid, d_snapshot)."""
    l, c_gd, c_at, c_mlp = cache
    grads: dict[str, np.ndarray] = {}
    d_zhat = _mlp_bwd(c_mlp, d_grid, grads)
    d_attn = d_zhat
    dz1, dg, at_grads = wmca_mod.wmca_attend_bwd(c_at, d_attn)
    grads.update(at_grads)
    store.accumulate_prefixed(f"wmca.up{l}", grads)
    d_snap = gdown_bwd(c_gd, dg, store, f"mem{l}.gdown")
    return dz1 + d_zhat, d_snap


# ---------------------------------------------------------------------------
# down write


def down_write_make_message_fwd(state_hi: MemoryState, lo_snapshot: np.ndarray,
                                lo_version: int, store, heads: int):
    """Generate the additive residual for level (hi - 1) on the higher
    level's worker: delta = [MLP(LN(zhat)) + zhat] - snapshot where
    zhat = Upsample2(W-MCA(G_down(snapshot), z_hi)) + snapshot."""
    lo = state_hi.level - 1
    g, c_gd = gdown_fwd(lo_snapshot, store, f"mem{lo}.down.gdown")
    if g.shape[:2] != state_hi.grid.shape[:2]:
        raise ShapeError(f"query grid {g.shape[:2]} vs high state {state_hi.grid.shape[:2]}")
    p = store.subset(f"wmca.down{lo}")
    attn, c_at = wmca_mod.wmca_attend_fwd(g, state_hi.grid, p, heads)
    up, c_up = upsample2_fwd(attn)
    hl, wl = lo_snapshot.shape[:2]
    z_hat = up[:hl, :wl] + lo_snapshot
    full, c_mlp = _mlp_fwd(z_hat, p)
    delta = full - lo_snapshot
    msg = DownMessage(lo, delta, lo_version)
    return msg, (lo, up.shape, c_gd, c_at, c_up, c_mlp)


def down_write_make_message_bwd(cache, d_delta, store):
    """Returns (d_state_hi_grid, d_lo_snapshot)."""
    lo, up_shape, c_gd, c_at, c_up, c_mlp = cache
    grads: dict[str, np.ndarray] = {}
    d_zhat = _mlp_bwd(c_mlp, d_delta, grads)
    d_snap = d_zhat - d_delta
    d_up = np.zeros(up_shape, dtype=d_delta.dtype)
    hl, wl = d_zhat.shape[:2]
    d_up[:hl, :wl] = d_zhat
    d_attn = upsample2_bwd(c_up, d_up)
    dg, d_hi, at_grads = wmca_mod.wmca_attend_bwd(c_at, d_attn)
    grads.update(at_grads)
    store.accumulate_prefixed(f"wmca.down{lo}", grads)
    d_snap = d_snap + gdown_bwd(c_gd, dg, store, f"mem{lo}.down.gdown")
    return d_hi, d_snap


def down_write_apply(state: MemoryState, msg: DownMessage) -> MemoryState:
    """z <- z + delta; rejects messages stamped against an older version."""
    if msg.target_level != state.level:
        raise ShapeError(f"message for level {msg.target_level} applied to {state.level}")
    if msg.version != state.version:
        raise StaleMessageError(
            f"level {state.level} moved from version {msg.version} to {state.version}")
    return state.bumped(state.grid + msg.delta)


# the apply backward: d(new grid) flows unchanged to both the old grid and
# the message delta
def down_write_apply_bwd(d_grid):
    return d_grid, d_grid


# ---------------------------------------------------------------------------
# update


def update_state_fwd(state: MemoryState, store):
    """z <- F_u(LN(z)) with {1, 3, 9} pre-activation residual blocks."""
    l = state.level
    n_blocks = RESIDUAL_LAYERS[l - 1]
    pre = f"mem{l}.update"
    pln = store.subset(f"{pre}.ln")
    x, c_ln = layer_norm_fwd(state.grid, pln["g"], pln["b"])
    caches = [c_ln]
    for i in range(1, n_blocks + 1):
        x, c = residual_block_fwd(x, store.subset(f"{pre}.block{i}"), GN_GROUPS)
        caches.append(c)
    return state.bumped(x), (l, caches)


def update_state_bwd(cache, d_grid, store):
    l, caches = cache
    pre = f"mem{l}.update"
    n_blocks = RESIDUAL_LAYERS[l - 1]
    d = d_grid
    for i in range(n_blocks, 0, -1):
        d, grads = residual_block_bwd(caches[i], d)
        store.accumulate_prefixed(f"{pre}.block{i}", grads)
    dz, dg, db = layer_norm_bwd(caches[0], d)
    store.accumulate_prefixed(f"{pre}.ln", {"g": dg, "b": db})
    return dz


# ---------------------------------------------------------------------------
# readout


def readout_fwd(state: MemoryState, store, step: int = 0):
    """o = SiLU(GroupNorm8(Conv1x1(LN(z)))); never mutates the state."""
    p = store.subset(f"mem{state.level}.readout")
    x, c_ln = layer_norm_fwd(state.grid, p["ln.g"], p["ln.b"])
    y, c_conv = conv2d_fwd(x, p["conv.w"], p["conv.b"], 1)
    n, c_gn = group_norm_fwd(y, GN_GROUPS, p["gn.g"], p["gn.b"])
    o, c_act = silu_fwd(n)
    return Readout(state.level, step, o), (state.level, c_ln, c_conv, c_gn, c_act)


def readout_bwd(cache, d_out, store):
    l, c_ln, c_conv, c_gn, c_act = cache
    p = f"mem{l}.readout"
    dn = silu_bwd(c_act, d_out)
    dy, dg, db = group_norm_bwd(c_gn, dn)
    dx, dw, dbias = conv2d_bwd(c_conv, dy)
    dz, dlg, dlb = layer_norm_bwd(c_ln, dx)
    store.accumulate_prefixed(p, {"gn.g": dg, "gn.b": db, "conv.w": dw, "conv.b": dbias,
                                  "ln.g": dlg, "ln.b": dlb})
    return dz


# ---------------------------------------------------------------------------
# image write (sensor fusion into the top level)


def patchify(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) -> (H/16, W/16, 768) non-overlapping patch flattening."""
    h, w, c = image.shape
    if h % PATCH or w % PATCH:
        raise ShapeError(f"image dims {h}x{w} not divisible by patch size {PATCH}")
    return (image.reshape(h // PATCH, PATCH, w // PATCH, PATCH, c)
            .transpose(0, 2, 1, 3, 4).reshape(h // PATCH, w // PATCH, PATCH * PATCH * c))


def image_write_fwd(state: MemoryState, image: np.ndarray, store, heads: int):
    """Patch-embed the frame (stub encoder) and fuse it up-write-style."""
    l = state.level
    patches = patchify(image.astype(state.grid.dtype, copy=False))
    emb, c_emb = affine_fwd(patches, store[f"mem{l}.image.embed.w"],
                            store[f"mem{l}.image.embed.b"])
    if emb.shape[:2] != state.grid.shape[:2]:
        raise ShapeError(f"patch grid {emb.shape[:2]} vs state {state.grid.shape[:2]}")
    p = store.subset(f"wmca.image{l}")
    attn, c_at = wmca_mod.wmca_attend_fwd(state.grid, emb, p, heads)
    z_hat = attn + state.grid
    z_new, c_mlp = _mlp_fwd(z_hat, p)
    return state.bumped(z_new), (l, c_emb, c_at, c_mlp)


def image_write_bwd(cache, d_grid, store):
    l, c_emb, c_at, c_mlp = cache
    grads: dict[str, np.ndarray] = {}
    d_zhat = _mlp_bwd(c_mlp, d_grid, grads)
    dz1, demb, at_grads = wmca_mod.wmca_attend_bwd(c_at, d_zhat)
    grads.update(at_grads)
    store.accumulate_prefixed(f"wmca.image{l}", grads)
    _, dw, db = affine_bwd(c_emb, demb)
    store.accumulate_prefixed(f"mem{l}.image.embed", {"w": dw, "b": db})
    return dz1 + d_zhat

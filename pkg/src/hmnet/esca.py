"""Event sparse cross attention: embed raw events and write them into the
level-1 memory cells whose spatial window contains them.

Each event is embedded from its relative timestamp, window-relative position
(pixel centers, so coordinates never degenerate to 0) and polarity one-hot.
Active cells attend from their (layer-normed) state over the events in
their window, with one extra trainable "gate" logit per head appended before
the softmax; the gate column is dropped after the softmax so low-affinity
(noise) events lose their attention mass instead of being written. The
attention output is fused with the cell state through the same residual +
MLP structure the grid-to-grid writes use.

Inactive cells are returned untouched (bit-identical) and cost nothing.

``esca_dense_oracle`` re-derives the same semantics with plain loops over
every cell and every event (window membership by definition, no sparsity
shortcuts); it is the verification reference and shares no code with the
fast path.
"""

from __future__ import annotations

import numpy as np

from ._backend import active_backend
from .errors import ShapeError
from .events import EventSlice, WindowIndex, build_window_index
from .ops import (MACS, affine_bwd, affine_fwd, gelu_bwd, gelu_fwd,
                  layer_norm_bwd, layer_norm_fwd)

PARAM_BRANCHES = ("embed_t", "embed_xy", "embed_p")


def init_esca_params(store, dim, heads, rng, scale=0.02, prefix="esca", dtype=np.float64):
    """Create every esca.* parameter for a level of width ``dim``."""
    if dim % 4 or dim % heads:
        raise ShapeError(f"esca dim {dim} must divide by 4 and by heads {heads}")
    widths = {"embed_t": (1, dim // 4), "embed_xy": (2, dim // 2), "embed_p": (2, dim // 4)}

    def w(shape):
        return (rng.normal(size=shape) * scale).astype(dtype)

    for name, (din, dout) in widths.items():
        store.add(f"{prefix}.{name}.w1", w((din, dout)))
        store.add(f"{prefix}.{name}.b1", np.zeros(dout, dtype))
        store.add(f"{prefix}.{name}.ln_g", np.ones(dout, dtype))
        store.add(f"{prefix}.{name}.ln_b", np.zeros(dout, dtype))
        store.add(f"{prefix}.{name}.w2", w((dout, dout)))
        store.add(f"{prefix}.{name}.b2", np.zeros(dout, dtype))
    store.add(f"{prefix}.embed_ln.g", np.ones(dim, dtype))
    store.add(f"{prefix}.embed_ln.b", np.zeros(dim, dtype))
    store.add(f"{prefix}.q.ln_g", np.ones(dim, dtype))
    store.add(f"{prefix}.q.ln_b", np.zeros(dim, dtype))
    for nm in ("q", "k", "v", "out"):
        store.add(f"{prefix}.{nm}.w", w((dim, dim)))
        store.add(f"{prefix}.{nm}.b", np.zeros(dim, dtype))
    store.add(f"{prefix}.gate.w", np.zeros(heads, dtype))
    store.add(f"{prefix}.mlp.ln_g", np.ones(dim, dtype))
    store.add(f"{prefix}.mlp.ln_b", np.zeros(dim, dtype))
    store.add(f"{prefix}.mlp.w1", w((dim, dim)))
    store.add(f"{prefix}.mlp.b1", np.zeros(dim, dtype))
    store.add(f"{prefix}.mlp.w2", w((dim, dim)))
    store.add(f"{prefix}.mlp.b2", np.zeros(dim, dtype))


def event_features(sl: EventSlice, stride: int, dtype=np.float64):
    """Raw per-event inputs: relative timestamp (E,1), window-relative pixel
    centers (E,2), polarity one-hot (E,2) with columns (-1, +1)."""
    dt = sl.t_end - sl.t_start
    t_rel = ((sl.t.astype(np.float64) - sl.t_start) / dt).astype(dtype)[:, None]
    xr = (((sl.x.astype(np.int64) % stride) + 0.5) / stride).astype(dtype)
    yr = (((sl.y.astype(np.int64) % stride) + 0.5) / stride).astype(dtype)
    xy = np.stack([xr, yr], axis=1)
    p1h = np.stack([sl.p == -1, sl.p == 1], axis=1).astype(dtype)
    return t_rel, xy, p1h


def _branch_fwd(x, p, name):
    y1, c1 = affine_fwd(x, p[f"{name}.w1"], p[f"{name}.b1"])
    n1, c2 = layer_norm_fwd(y1, p[f"{name}.ln_g"], p[f"{name}.ln_b"])
    a1, c3 = gelu_fwd(n1)
    y2, c4 = affine_fwd(a1, p[f"{name}.w2"], p[f"{name}.b2"])
    return y2, (c1, c2, c3, c4)


def _branch_bwd(cache, dy, name, grads):
    c1, c2, c3, c4 = cache
    da1, grads[f"{name}.w2"], grads[f"{name}.b2"] = affine_bwd(c4, dy)
    dn1 = gelu_bwd(c3, da1)
    dy1, grads[f"{name}.ln_g"], grads[f"{name}.ln_b"] = layer_norm_bwd(c2, dn1)
    dx, grads[f"{name}.w1"], grads[f"{name}.b1"] = affine_bwd(c1, dy1)
    return dx


def embed_events_fwd(sl: EventSlice, stride: int, p: dict, dtype=np.float64):
    """Per-event embedding d_i: branch MLPs, concatenation, LayerNorm."""
    t_rel, xy, p1h = event_features(sl, stride, dtype)
    dt_out, ct = _branch_fwd(t_rel, p, "embed_t")
    dxy_out, cxy = _branch_fwd(xy, p, "embed_xy")
    dp_out, cp = _branch_fwd(p1h, p, "embed_p")
    cat = np.concatenate([dt_out, dxy_out, dp_out], axis=1)
    d, cln = layer_norm_fwd(cat, p["embed_ln.g"], p["embed_ln.b"])
    splits = (dt_out.shape[1], dt_out.shape[1] + dxy_out.shape[1])
    return d, (ct, cxy, cp, cln, splits)


def embed_events_bwd(cache, dd, grads):
    ct, cxy, cp, cln, splits = cache
    dcat, grads["embed_ln.g"], grads["embed_ln.b"] = layer_norm_bwd(cln, dd)
    _branch_bwd(ct, dcat[:, :splits[0]], "embed_t", grads)
    _branch_bwd(cxy, dcat[:, splits[0]:splits[1]], "embed_xy", grads)
    _branch_bwd(cp, dcat[:, splits[1]:], "embed_p", grads)


def esca_attend_fwd(z, win: WindowIndex, sl: EventSlice, p: dict, heads: int,
                    gate_enabled: bool = True):
    """Gated windowed cross attention from events into active memory cells.

    z: (Hc, Wc, D) level-1 grid whose stride matches the window index.
    Returns (z_out, cache); inactive cells of z_out are the same values.
    """
    hc, wc, dim = z.shape
    if (hc, wc) != (win.grid_rows, win.grid_cols):
        raise ShapeError(f"grid {z.shape[:2]} does not match index "
                         f"{(win.grid_rows, win.grid_cols)} at stride {win.stride}")
    if win.n_active == 0:
        return z, None
    dh = dim // heads

    d, c_embed = embed_events_fwd(sl, win.stride, p, z.dtype)
    keys, c_k = affine_fwd(d, p["k.w"], p["k.b"])
    values, c_v = affine_fwd(d, p["v.w"], p["v.b"])
    kg = keys[win.order].reshape(-1, heads, dh)
    vg = values[win.order].reshape(-1, heads, dh)

    flat_idx = win.cells[:, 0] * wc + win.cells[:, 1]
    z_act = z.reshape(-1, dim)[flat_idx]
    zn, c_zn = layer_norm_fwd(z_act, p["q.ln_g"], p["q.ln_b"])
    q2, c_q = affine_fwd(zn, p["q.w"], p["q.b"])
    q = q2.reshape(-1, heads, dh)

    gate = p["gate.w"] if gate_enabled else None
    be = active_backend()
    h, a_ev, a_gate = be.esca_attn_fwd(q, kg, vg, win.starts, gate)
    MACS.add(2 * len(win.order) * dim)

    h_cat = h.reshape(-1, dim)
    h_out, c_out = affine_fwd(h_cat, p["out.w"], p["out.b"])
    z_hat = z_act + h_out
    mn, c_mn = layer_norm_fwd(z_hat, p["mlp.ln_g"], p["mlp.ln_b"])
    m1, c_m1 = affine_fwd(mn, p["mlp.w1"], p["mlp.b1"])
    ma, c_ma = gelu_fwd(m1)
    m2, c_m2 = affine_fwd(ma, p["mlp.w2"], p["mlp.b2"])
    z_new = m2 + z_hat

    z_out = z.copy()
    z_out.reshape(-1, dim)[flat_idx] = z_new
    cache = (z.shape, flat_idx, win, gate_enabled, heads,
             c_embed, c_k, c_v, c_zn, c_q, (q, kg, vg, gate, a_ev, a_gate),
             c_out, c_mn, c_m1, c_ma, c_m2)
    return z_out, cache


def esca_attend_bwd(cache, d_zout):
    """Returns (d_zin, grads) with grads keyed by esca.* suffix. Only the
    parameters touched by the forward appear (a no-event forward has no
    cache and contributes nothing)."""
    grads: dict[str, np.ndarray] = {}
    if cache is None:
        return d_zout, grads
    (zshape, flat_idx, win, gate_enabled, heads,
     c_embed, c_k, c_v, c_zn, c_q, kern, c_out, c_mn, c_m1, c_ma, c_m2) = cache
    dim = zshape[-1]
    dh = dim // heads
    q, kg, vg, gate, a_ev, a_gate = kern

    d_zin = d_zout.copy()
    dz_new = d_zout.reshape(-1, dim)[flat_idx]

    dma, grads["mlp.w2"], grads["mlp.b2"] = affine_bwd(c_m2, dz_new)
    dm1 = gelu_bwd(c_ma, dma)
    dmn, grads["mlp.w1"], grads["mlp.b1"] = affine_bwd(c_m1, dm1)
    dz_hat_ln, grads["mlp.ln_g"], grads["mlp.ln_b"] = layer_norm_bwd(c_mn, dmn)
    dz_hat = dz_hat_ln + dz_new

    dh_cat, grads["out.w"], grads["out.b"] = affine_bwd(c_out, dz_hat)
    dq, dkg, dvg, dgate = active_backend().esca_attn_bwd(
        q, kg, vg, win.starts, gate, a_ev, a_gate, dh_cat.reshape(-1, heads, dh))
    if gate_enabled:
        grads["gate.w"] = dgate

    dzn, grads["q.w"], grads["q.b"] = affine_bwd(c_q, dq.reshape(-1, dim))
    dz_act_q, grads["q.ln_g"], grads["q.ln_b"] = layer_norm_bwd(c_zn, dzn)
    dz_act = dz_hat + dz_act_q

    dkeys = np.zeros((len(win.order), dim), dtype=d_zout.dtype)
    dvalues = np.zeros_like(dkeys)
    dkeys[win.order] = dkg.reshape(-1, dim)
    dvalues[win.order] = dvg.reshape(-1, dim)
    dd_k, grads["k.w"], grads["k.b"] = affine_bwd(c_k, dkeys)
    dd_v, grads["v.w"], grads["v.b"] = affine_bwd(c_v, dvalues)
    embed_events_bwd(c_embed, dd_k + dd_v, grads)

    d_zin.reshape(-1, dim)[flat_idx] = dz_act
    return d_zin, grads


# ---------------------------------------------------------------------------
# dense verification oracle


def _oracle_ln(x, g, b, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * g + b


def _oracle_ln_rows(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = _oracle_ln(x[i], g, b, eps)
    return out


def _oracle_gelu(x):
    from scipy.special import erf as _erf
    return x * 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))


def _oracle_mlp2(x, p, name):
    y = x @ p[f"{name}.w1"] + p[f"{name}.b1"]
    y = _oracle_ln_rows(y, p[f"{name}.ln_g"], p[f"{name}.ln_b"])
    y = _oracle_gelu(y)
    return y @ p[f"{name}.w2"] + p[f"{name}.b2"]


def esca_dense_oracle(z, sl: EventSlice, p: dict, heads: int, stride: int,
                      gate_enabled: bool = True):
    """Reference semantics: visit every cell, recompute window membership by
    definition, run the attention math with plain loops. Small instances."""
    hc, wc, dim = z.shape
    dh = dim // heads
    dt = sl.t_end - sl.t_start
    z_out = z.copy()
    for j in range(hc):
        for k in range(wc):
            members = [i for i in range(len(sl))
                       if int(sl.y[i]) // stride == j and int(sl.x[i]) // stride == k]
            if not members:
                continue  # untouched, no attention evaluated
            feats_t = np.array([[(int(sl.t[i]) - sl.t_start) / dt] for i in members], z.dtype)
            feats_xy = np.array(
                [[((int(sl.x[i]) % stride) + 0.5) / stride,
                  ((int(sl.y[i]) % stride) + 0.5) / stride] for i in members], z.dtype)
            feats_p = np.array([[1.0 if int(sl.p[i]) == -1 else 0.0,
                                 1.0 if int(sl.p[i]) == 1 else 0.0] for i in members], z.dtype)
            cat = np.concatenate([
                _oracle_mlp2(feats_t, p, "embed_t"),
                _oracle_mlp2(feats_xy, p, "embed_xy"),
                _oracle_mlp2(feats_p, p, "embed_p"),
            ], axis=1)
            d = _oracle_ln_rows(cat, p["embed_ln.g"], p["embed_ln.b"])
            keys = d @ p["k.w"] + p["k.b"]
            values = d @ p["v.w"] + p["v.b"]
            zc = z[j, k]
            q = _oracle_ln(zc, p["q.ln_g"], p["q.ln_b"]) @ p["q.w"] + p["q.b"]
            h = np.empty(dim, z.dtype)
            for head in range(heads):
                sel = slice(head * dh, (head + 1) * dh)
                logits = keys[:, sel] @ q[sel] / np.sqrt(dh)
                if gate_enabled:
                    logits = np.concatenate([logits, p["gate.w"][head:head + 1]])
                logits = logits - logits.max()
                a = np.exp(logits) / np.exp(logits).sum()
                if gate_enabled:
                    a = a[:-1]
                h[sel] = a @ values[:, sel]
            h = h @ p["out.w"] + p["out.b"]
            z_hat = zc + h
            m = _oracle_ln(z_hat, p["mlp.ln_g"], p["mlp.ln_b"])
            m = _oracle_gelu(m @ p["mlp.w1"] + p["mlp.b1"]) @ p["mlp.w2"] + p["mlp.b2"]
            z_out[j, k] = m + z_hat
    return z_out


def event_write_grid(z, sl: EventSlice, p: dict, heads: int, stride: int,
                     gate_enabled: bool = True):
    """Convenience: index + attend in one call (the level-1 event write)."""
    win = build_window_index(sl, stride, z.shape[:2])
    return esca_attend_fwd(z, win, sl, p, heads, gate_enabled)

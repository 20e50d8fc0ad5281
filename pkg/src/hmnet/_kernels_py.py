"""Pure-numpy implementations of the two backend kernels.

These are the fallback for :mod:`hmnet._core` (the compiled extension) and
the reference its outputs are compared against. Both backends implement the
same contracts:

* ``conv2d_fwd/bwd`` — channel-last 2-D convolution, zero padding k//2,
  ceil-mode output extents.
* ``esca_attn_fwd/bwd`` — gated softmax attention over ragged per-cell event
  segments (CSR layout), one query per active cell.

Accumulation order within a cell follows segment order, so results are
bit-deterministic per backend.
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(h, w, k, stride):
    ho = -(-h // stride)
    wo = -(-w // stride)
    pad = k // 2
    # zero padding that covers the last window in ceil mode
    pad_h_end = max(0, (ho - 1) * stride - pad + k - h)
    pad_w_end = max(0, (wo - 1) * stride - pad + k - w)
    return ho, wo, pad, pad_h_end, pad_w_end


def _im2col(x, k, stride):
    h, w, din = x.shape
    ho, wo, pad, pe_h, pe_w = _conv_geometry(h, w, k, stride)
    xp = np.pad(x, ((pad, pe_h), (pad, pe_w), (0, 0)))
    cols = np.empty((ho, wo, k, k, din), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            cols[:, :, di, dj, :] = xp[di:di + ho * stride:stride, dj:dj + wo * stride:stride, :]
    return cols, (pad, pe_h, pe_w)


def conv2d_fwd(x, w, b, stride):
    """x: (H, W, Din), w: (k, k, Din, Dout), b: (Dout,) -> (ceil(H/s), ceil(W/s), Dout)."""
    k = w.shape[0]
    din, dout = w.shape[2], w.shape[3]
    cols, _ = _im2col(x, k, stride)
    ho, wo = cols.shape[0], cols.shape[1]
    y = cols.reshape(ho * wo, k * k * din) @ w.reshape(k * k * din, dout) + b
    return y.reshape(ho, wo, dout)


def conv2d_bwd(x, w, dy, stride):
    """Returns (dx, dw, db) for the convolution above."""
    k = w.shape[0]
    h, win, din = x.shape
    dout = w.shape[3]
    ho, wo = dy.shape[0], dy.shape[1]
    cols, (pad, pe_h, pe_w) = _im2col(x, k, stride)
    dy_mat = dy.reshape(ho * wo, dout)
    dw = (cols.reshape(ho * wo, k * k * din).T @ dy_mat).reshape(w.shape)
    db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ w.reshape(k * k * din, dout).T).reshape(ho, wo, k, k, din)
    dxp = np.zeros((h + pad + pe_h, win + pad + pe_w, din), dtype=x.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[di:di + ho * stride:stride, dj:dj + wo * stride:stride, :] += dcols[:, :, di, dj, :]
    dx = dxp[pad:pad + h, pad:pad + win, :]
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# gated ragged attention (the ESCA inner loop)


def esca_attn_fwd(q, keys, values, starts, gate):
    """Per-cell gated cross attention over ragged event segments.

    q: (C, H, dh) queries; keys/values: (E, H, dh) grouped by cell via
    ``starts`` (C+1 CSR offsets); gate: (H,) extra logit per head or None.
    Returns (h, a_ev, a_gate): outputs (C, H, dh), per-event attention
    (E, H) and per-cell gate attention (C, H) (zeros when gate is None).
    """
    n_cells, n_heads, dh = q.shape
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=q.dtype))
    h = np.zeros_like(q)
    a_ev = np.zeros((keys.shape[0], n_heads), dtype=q.dtype)
    a_gate = np.zeros((n_cells, n_heads), dtype=q.dtype)
    for c in range(n_cells):
        lo, hi = starts[c], starts[c + 1]
        kc = keys[lo:hi]
        logits = np.einsum("hd,lhd->lh", q[c], kc) * scale  # (L, H)
        if gate is not None:
            full = np.concatenate([logits, gate[None, :]], axis=0)
        else:
            full = logits
        full = full - full.max(axis=0, keepdims=True)
        e = np.exp(full)
        a = e / e.sum(axis=0, keepdims=True)
        if gate is not None:
            a_ev[lo:hi] = a[:-1]
            a_gate[c] = a[-1]
        else:
            a_ev[lo:hi] = a
        h[c] = np.einsum("lh,lhd->hd", a_ev[lo:hi], values[lo:hi])
    return h, a_ev, a_gate


def esca_attn_bwd(q, keys, values, starts, gate, a_ev, a_gate, dh_out):
    """VJP of :func:`esca_attn_fwd`. Returns (dq, dkeys, dvalues, dgate);
    dgate is None when gate is None."""
    n_cells, n_heads, dh = q.shape
    scale = 1.0 / np.sqrt(np.asarray(dh, dtype=q.dtype))
    dq = np.zeros_like(q)
    dkeys = np.zeros_like(keys)
    dvalues = np.zeros_like(values)
    dgate = np.zeros(n_heads, dtype=q.dtype) if gate is not None else None
    for c in range(n_cells):
        lo, hi = starts[c], starts[c + 1]
        a = a_ev[lo:hi]                                    # (L, H)
        dvalues[lo:hi] += a[:, :, None] * dh_out[c][None, :, :]
        da = np.einsum("hd,lhd->lh", dh_out[c], values[lo:hi])
        s = (a * da).sum(axis=0)                           # (H,) gate slot has da = 0
        dlogits = a * (da - s[None, :])
        if dgate is not None:
            dgate += -a_gate[c] * s
        dq[c] = np.einsum("lh,lhd->hd", dlogits, keys[lo:hi]) * scale
        dkeys[lo:hi] += dlogits[:, :, None] * (q[c][None, :, :] * scale)
    return dq, dkeys, dvalues, dgate

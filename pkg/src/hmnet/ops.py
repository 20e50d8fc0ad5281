"""Differentiable dense-tensor primitives.

Every operation comes as a ``*_fwd`` returning ``(output, cache)`` and a
``*_bwd`` taking ``(cache, upstream)`` and returning exact vector-Jacobian
products. There is no autodiff graph: composites hand-chain these backwards,
which keeps every gradient path visible to the finite-difference harness.

Layout is channel-last (H x W x D) throughout. Forward passes use a fixed
summation order, so results are bit-deterministic per backend.

MAC accounting: matmul-like multiply-accumulates only (affine, convolution,
attention score/value products, bilinear interpolation). Normalizations,
activations and softmax are excluded by convention; the analytic cost model
mirrors the same policy.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from ._backend import active_backend
from .errors import ShapeError

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class MacCounter:
    """Process-wide multiply-accumulate counter (forward passes only)."""

    __slots__ = ("enabled", "total")

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, n: int) -> None:
        if self.enabled:
            self.total += int(n)


MACS = MacCounter()


@contextmanager
def mac_counting():
    """Enable MAC counting inside the block; yields the counter (reset to 0)."""
    prev_enabled, prev_total = MACS.enabled, MACS.total
    MACS.enabled, MACS.total = True, 0
    try:
        yield MACS
    finally:
        MACS.enabled, MACS.total = prev_enabled, prev_total


# ---------------------------------------------------------------------------
# affine


def affine_fwd(x, w, b):
    """y = x @ w + b over the last axis; x: (..., Din), w: (Din, Dout)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine: {x.shape} @ {w.shape}")
    MACS.add(x.size // x.shape[-1] * w.shape[0] * w.shape[1])
    y = x @ w + b
    return y, (x, w)


def affine_bwd(cache, dy):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# normalizations


def layer_norm_fwd(x, gain, shift, eps=LN_EPS):
    """Zero mean / unit variance over the last axis, then gain/shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain + shift
    return y, (xhat, inv, gain)


def layer_norm_bwd(cache, dy):
    xhat, inv, gain = cache
    d = xhat.shape[-1]
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dshift = dy.sum(axis=axes)
    return dx, dgain, dshift


def group_norm_fwd(x, groups, gain, shift, eps=LN_EPS):
    """x: (H, W, D); normalization over (H, W, D/groups) per channel group."""
    h, w, d = x.shape
    if d % groups:
        raise ShapeError(f"group_norm: {d} channels not divisible by {groups} groups")
    xg = x.reshape(h, w, groups, d // groups)
    mu = xg.mean(axis=(0, 1, 3), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(0, 1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(h, w, d)
    y = xhat * gain + shift
    return y, (xhat, inv, gain, groups)


def group_norm_bwd(cache, dy):
    xhat, inv, gain, groups = cache
    h, w, d = xhat.shape
    dg = d // groups
    dxhat = (dy * gain).reshape(h, w, groups, dg)
    xh = xhat.reshape(h, w, groups, dg)
    m1 = dxhat.mean(axis=(0, 1, 3), keepdims=True)
    m2 = (dxhat * xh).mean(axis=(0, 1, 3), keepdims=True)
    dx = (inv * (dxhat - m1 - xh * m2)).reshape(h, w, d)
    dgain = (dy * xhat).sum(axis=(0, 1))
    dshift = dy.sum(axis=(0, 1))
    return dx, dgain, dshift


# ---------------------------------------------------------------------------
# activations


def gelu_fwd(x):
    """Exact Gaussian-CDF GELU (not the tanh approximation)."""
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, (x, phi)


def gelu_bwd(cache, dy):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (phi + x * pdf)


def silu_fwd(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def silu_bwd(cache, dy):
    x, sig = cache
    return dy * (sig * (1.0 + x * (1.0 - sig)))


def activation_fwd(x, kind):
    if kind == "gelu":
        return gelu_fwd(x)
    if kind == "silu":
        return silu_fwd(x)
    raise ShapeError(f"unknown activation kind {kind!r}")


def activation_bwd(kind, cache, dy):
    if kind == "gelu":
        return gelu_bwd(cache, dy)
    if kind == "silu":
        return silu_bwd(cache, dy)
    raise ShapeError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# convolution (backend kernel)


def conv2d_fwd(x, w, b, stride=1):
    """Channel-last conv; k in {1, 3}, stride in {1, 2}, zero padding k//2,
    ceil-mode output extents."""
    k = w.shape[0]
    if k not in (1, 3) or w.shape[1] != k:
        raise ShapeError(f"conv2d: unsupported kernel {w.shape[:2]}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: unsupported stride {stride}")
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: {x.shape} with kernel {w.shape}")
    be = active_backend()
    y = be.conv2d_fwd(x, w, b, stride)
    MACS.add(y.shape[0] * y.shape[1] * k * k * w.shape[2] * w.shape[3])
    return y, (x, w, stride)


def conv2d_bwd(cache, dy):
    x, w, stride = cache
    return active_backend().conv2d_bwd(x, w, dy, stride)


# ---------------------------------------------------------------------------
# bilinear upsampling (factor 2, align_corners=False)


def _upsample_indices(n, dtype):
    # output i samples source at (i + 0.5)/2 - 0.5
    src = (np.arange(2 * n, dtype=np.float64) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = (src - i0).astype(dtype)
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i0 + 1, 0, n - 1)
    return i0c, i1c, frac


def upsample2_fwd(x):
    """(H, W, D) -> (2H, 2W, D) bilinear, align_corners=False."""
    h, w, _ = x.shape
    r0, r1, fr = _upsample_indices(h, x.dtype)
    c0, c1, fc = _upsample_indices(w, x.dtype)
    top = x[r0][:, c0] * (1 - fc)[None, :, None] + x[r0][:, c1] * fc[None, :, None]
    bot = x[r1][:, c0] * (1 - fc)[None, :, None] + x[r1][:, c1] * fc[None, :, None]
    y = top * (1 - fr)[:, None, None] + bot * fr[:, None, None]
    MACS.add(4 * y.size)
    return y, (x.shape, r0, r1, fr, c0, c1, fc)


def upsample2_bwd(cache, dy):
    """Exact adjoint (transpose) of the interpolation map."""
    shape, r0, r1, fr, c0, c1, fc = cache
    dx = np.zeros(shape, dtype=dy.dtype)
    wr = [(r0, (1 - fr)), (r1, fr)]
    wc = [(c0, (1 - fc)), (c1, fc)]
    for ri, rw in wr:
        for ci, cw in wc:
            contrib = dy * rw[:, None, None] * cw[None, :, None]
            np.add.at(dx, (ri[:, None], ci[None, :]), contrib)
    return dx


# ---------------------------------------------------------------------------
# softmax


def softmax_fwd(x):
    """Row softmax over the last axis with max-subtraction."""
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, (y,)


def softmax_bwd(cache, dy):
    (y,) = cache
    s = (dy * y).sum(axis=-1, keepdims=True)
    return y * (dy - s)


# ---------------------------------------------------------------------------
# residual block: x + conv(act(norm(conv(act(norm(x))))))


RESIDUAL_PARAM_KEYS = (
    "gn1.g", "gn1.b", "conv1.w", "conv1.b", "gn2.g", "gn2.b", "conv2.w", "conv2.b",
)


def residual_block_fwd(x, p, groups=8):
    """Pre-activation residual block with GroupNorm(8) and SiLU; 3x3 convs."""
    n1, c1 = group_norm_fwd(x, groups, p["gn1.g"], p["gn1.b"])
    a1, ca1 = silu_fwd(n1)
    y1, cc1 = conv2d_fwd(a1, p["conv1.w"], p["conv1.b"], 1)
    n2, c2 = group_norm_fwd(y1, groups, p["gn2.g"], p["gn2.b"])
    a2, ca2 = silu_fwd(n2)
    y2, cc2 = conv2d_fwd(a2, p["conv2.w"], p["conv2.b"], 1)
    return x + y2, (c1, ca1, cc1, c2, ca2, cc2)


def residual_block_bwd(cache, dy):
    c1, ca1, cc1, c2, ca2, cc2 = cache
    g = {}
    da2, g["conv2.w"], g["conv2.b"] = conv2d_bwd(cc2, dy)
    dn2 = silu_bwd(ca2, da2)
    dy1, g["gn2.g"], g["gn2.b"] = group_norm_bwd(c2, dn2)
    da1, g["conv1.w"], g["conv1.b"] = conv2d_bwd(cc1, dy1)
    dn1 = silu_bwd(ca1, da1)
    dx, g["gn1.g"], g["gn1.b"] = group_norm_bwd(c1, dn1)
    return dx + dy, g

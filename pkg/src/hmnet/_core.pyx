# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels: ragged gated event attention (fwd/bwd) and direct
channel-last convolution (fwd/bwd). Contracts and accumulation order match
hmnet._kernels_py; only summation strategy differs (scalar loops here,
BLAS/ufuncs there), so cross-backend agreement is at machine precision."""

import numpy as np

cimport cython
from libc.math cimport exp, sqrt

ctypedef fused real:
    float
    double


# ---------------------------------------------------------------------------
# convolution


def conv2d_fwd(x, w, b, int stride):
    y = np.zeros((-(-x.shape[0] // stride), -(-x.shape[1] // stride), w.shape[3]),
                 dtype=x.dtype)
    _conv2d_fwd(x, w, b, stride, y)
    return y


def _conv2d_fwd(real[:, :, ::1] x, real[:, :, :, ::1] w, real[::1] b,
                int stride, real[:, :, ::1] y):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], din = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], dout = w.shape[3]
    cdef Py_ssize_t ho = y.shape[0], wo = y.shape[1]
    cdef Py_ssize_t pad = k // 2
    cdef Py_ssize_t i, j, di, dj, ci, co, si, sj
    cdef real xv
    for i in range(ho):
        for j in range(wo):
            for co in range(dout):
                y[i, j, co] = b[co]
    for i in range(ho):
        for j in range(wo):
            for di in range(k):
                si = i * stride - pad + di
                if si < 0 or si >= h:
                    continue
                for dj in range(k):
                    sj = j * stride - pad + dj
                    if sj < 0 or sj >= wd:
                        continue
                    for ci in range(din):
                        xv = x[si, sj, ci]
                        for co in range(dout):
                            y[i, j, co] += xv * w[di, dj, ci, co]


def conv2d_bwd(x, w, dy, int stride):
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[3], dtype=x.dtype)
    _conv2d_bwd(x, w, dy, stride, dx, dw, db)
    return dx, dw, db


def _conv2d_bwd(real[:, :, ::1] x, real[:, :, :, ::1] w, real[:, :, ::1] dy,
                int stride, real[:, :, ::1] dx, real[:, :, :, ::1] dw, real[::1] db):
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], din = x.shape[2]
    cdef Py_ssize_t k = w.shape[0], dout = w.shape[3]
    cdef Py_ssize_t ho = dy.shape[0], wo = dy.shape[1]
    cdef Py_ssize_t pad = k // 2
    cdef Py_ssize_t i, j, di, dj, ci, co, si, sj
    cdef real g, xv, acc
    for i in range(ho):
        for j in range(wo):
            for co in range(dout):
                db[co] += dy[i, j, co]
    for i in range(ho):
        for j in range(wo):
            for di in range(k):
                si = i * stride - pad + di
                if si < 0 or si >= h:
                    continue
                for dj in range(k):
                    sj = j * stride - pad + dj
                    if sj < 0 or sj >= wd:
                        continue
                    for ci in range(din):
                        xv = x[si, sj, ci]
                        acc = 0.0
                        for co in range(dout):
                            g = dy[i, j, co]
                            dw[di, dj, ci, co] += xv * g
                            acc += w[di, dj, ci, co] * g
                        dx[si, sj, ci] += acc


# ---------------------------------------------------------------------------
# ragged gated attention


def esca_attn_fwd(q, keys, values, starts, gate):
    cdef bint has_gate = gate is not None
    if not has_gate:
        gate = np.zeros(q.shape[1], dtype=q.dtype)
    h = np.zeros_like(q)
    a_ev = np.zeros((keys.shape[0], q.shape[1]), dtype=q.dtype)
    a_gate = np.zeros((q.shape[0], q.shape[1]), dtype=q.dtype)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    _esca_fwd(q, keys, values, starts, gate, has_gate, h, a_ev, a_gate)
    return h, a_ev, a_gate


def _esca_fwd(real[:, :, ::1] q, real[:, :, ::1] keys, real[:, :, ::1] values,
              long[::1] starts, real[::1] gate, bint has_gate,
              real[:, :, ::1] h, real[:, ::1] a_ev, real[:, ::1] a_gate):
    cdef Py_ssize_t n_cells = q.shape[0], n_heads = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t c, hd, e, d, lo, hi
    cdef real scale = <real>(1.0 / sqrt(<double>dh))
    cdef real m, s, logit, a, acc
    for c in range(n_cells):
        lo = starts[c]
        hi = starts[c + 1]
        for hd in range(n_heads):
            m = gate[hd] if has_gate else <real>-1e300
            for e in range(lo, hi):
                logit = 0.0
                for d in range(dh):
                    logit += q[c, hd, d] * keys[e, hd, d]
                logit *= scale
                a_ev[e, hd] = logit          # stash raw logits
                if logit > m:
                    m = logit
            s = 0.0
            for e in range(lo, hi):
                a = exp(a_ev[e, hd] - m)
                a_ev[e, hd] = a
                s += a
            if has_gate:
                a = exp(gate[hd] - m)
                a_gate[c, hd] = a
                s += a
            for e in range(lo, hi):
                a_ev[e, hd] /= s
            if has_gate:
                a_gate[c, hd] /= s
            for d in range(dh):
                acc = 0.0
                for e in range(lo, hi):
                    acc += a_ev[e, hd] * values[e, hd, d]
                h[c, hd, d] = acc


def esca_attn_bwd(q, keys, values, starts, gate, a_ev, a_gate, dh_out):
    cdef bint has_gate = gate is not None
    dq = np.zeros_like(q)
    dkeys = np.zeros_like(keys)
    dvalues = np.zeros_like(values)
    dgate = np.zeros(q.shape[1], dtype=q.dtype)
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    _esca_bwd(q, keys, values, starts, a_gate, a_ev, dh_out, has_gate,
              dq, dkeys, dvalues, dgate)
    return dq, dkeys, dvalues, (dgate if has_gate else None)


def _esca_bwd(real[:, :, ::1] q, real[:, :, ::1] keys, real[:, :, ::1] values,
              long[::1] starts, real[:, ::1] a_gate, real[:, ::1] a_ev,
              real[:, :, ::1] dh_out, bint has_gate,
              real[:, :, ::1] dq, real[:, :, ::1] dkeys, real[:, :, ::1] dvalues,
              real[::1] dgate):
    cdef Py_ssize_t n_cells = q.shape[0], n_heads = q.shape[1], dh = q.shape[2]
    cdef Py_ssize_t c, hd, e, d, lo, hi
    cdef real scale = <real>(1.0 / sqrt(<double>dh))
    cdef real s, da, dlog, a
    for c in range(n_cells):
        lo = starts[c]
        hi = starts[c + 1]
        for hd in range(n_heads):
            s = 0.0
            for e in range(lo, hi):
                a = a_ev[e, hd]
                da = 0.0
                for d in range(dh):
                    dvalues[e, hd, d] += a * dh_out[c, hd, d]
                    da += dh_out[c, hd, d] * values[e, hd, d]
                s += a * da
            for e in range(lo, hi):
                a = a_ev[e, hd]
                da = 0.0
                for d in range(dh):
                    da += dh_out[c, hd, d] * values[e, hd, d]
                dlog = a * (da - s)
                for d in range(dh):
                    dq[c, hd, d] += dlog * keys[e, hd, d] * scale
                    dkeys[e, hd, d] += dlog * q[c, hd, d] * scale
            if has_gate:
                dgate[hd] += -a_gate[c, hd] * s

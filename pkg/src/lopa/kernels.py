"""Batched multi-head attention kernels.

Layout is column-major in the feature sense: ``q`` is ``(B, H, dH, Lq)``,
``k`` is ``(B, H, dH, Lk)``, ``v`` is ``(B, H, dV, Lk)``.  Each query column
attends over every key column (no mask).

Two implementations exist with identical signatures: a numba ``@njit`` loop
nest and a vectorised numpy version.  ``LOPA_NUMBA=0`` in the environment
forces the numpy path; otherwise numba is used when it imports.
"""
from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("LOPA_NUMBA", "1") != "0"


def attention_forward_numpy(q, k, v, scale):
    s = np.matmul(np.swapaxes(q, 2, 3), k) * scale  # (B, H, Lq, Lk)
    s -= s.max(axis=3, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=3, keepdims=True)
    out = np.matmul(v, np.swapaxes(p, 2, 3))  # (B, H, dV, Lq)
    return out, p


def attention_backward_numpy(q, k, v, p, scale, dout):
    dv = np.matmul(dout, p)  # (B, H, dV, Lk)
    dp = np.matmul(np.swapaxes(dout, 2, 3), v)  # (B, H, Lq, Lk)
    ds = p * (dp - (p * dp).sum(axis=3, keepdims=True))
    ds *= scale
    dq = np.matmul(k, np.swapaxes(ds, 2, 3))
    dk = np.matmul(q, ds)
    return dq, dk, dv


if HAVE_NUMBA:

    # The loop nests work on row layouts (..., L, d) so the innermost loop
    # walks contiguous memory; the wrappers below transpose in and out.

    @njit(cache=True)
    def _forward_rows(qt, kt, vt, scale):
        B, H, Lq, dh = qt.shape
        Lk = kt.shape[2]
        dv = vt.shape[3]
        out = np.zeros((B, H, Lq, dv), dtype=qt.dtype)
        p = np.empty((B, H, Lq, Lk), dtype=qt.dtype)
        for b in range(B):
            for h in range(H):
                for i in range(Lq):
                    mx = -np.inf
                    for j in range(Lk):
                        s = 0.0
                        for c in range(dh):
                            s += qt[b, h, i, c] * kt[b, h, j, c]
                        s *= scale
                        p[b, h, i, j] = s
                        if s > mx:
                            mx = s
                    tot = 0.0
                    for j in range(Lk):
                        e = np.exp(p[b, h, i, j] - mx)
                        p[b, h, i, j] = e
                        tot += e
                    for j in range(Lk):
                        p[b, h, i, j] /= tot
                        w = p[b, h, i, j]
                        for c in range(dv):
                            out[b, h, i, c] += w * vt[b, h, j, c]
        return out, p

    @njit(cache=True)
    def _backward_rows(qt, kt, vt, p, scale, dot):
        B, H, Lq, dh = qt.shape
        Lk = kt.shape[2]
        dvd = vt.shape[3]
        dq = np.zeros_like(qt)
        dk = np.zeros_like(kt)
        dv = np.zeros_like(vt)
        dp = np.empty(Lk, dtype=qt.dtype)
        for b in range(B):
            for h in range(H):
                for i in range(Lq):
                    acc = 0.0
                    for j in range(Lk):
                        s = 0.0
                        w = p[b, h, i, j]
                        for c in range(dvd):
                            g = dot[b, h, i, c]
                            s += g * vt[b, h, j, c]
                            dv[b, h, j, c] += w * g
                        dp[j] = s
                        acc += w * s
                    for j in range(Lk):
                        ds = p[b, h, i, j] * (dp[j] - acc) * scale
                        for c in range(dh):
                            dq[b, h, i, c] += ds * kt[b, h, j, c]
                            dk[b, h, j, c] += ds * qt[b, h, i, c]
        return dq, dk, dv

    def _rows(a):
        return np.ascontiguousarray(np.swapaxes(a, 2, 3))

    def attention_forward_numba(q, k, v, scale):
        out, p = _forward_rows(_rows(q), _rows(k), _rows(v), scale)
        return np.swapaxes(out, 2, 3), p

    def attention_backward_numba(q, k, v, p, scale, dout):
        dq, dk, dv = _backward_rows(_rows(q), _rows(k), _rows(v), np.ascontiguousarray(p),
                                    scale, _rows(dout))
        return np.swapaxes(dq, 2, 3), np.swapaxes(dk, 2, 3), np.swapaxes(dv, 2, 3)

else:  # pragma: no cover
    attention_forward_numba = None
    attention_backward_numba = None


def attention_forward(q, k, v, scale):
    """Return ``(out, probs)``; ``probs`` is ``(B, H, Lq, Lk)``."""
    if USE_NUMBA:
        return attention_forward_numba(q, k, v, q.dtype.type(scale))
    return attention_forward_numpy(q, k, v, q.dtype.type(scale))


def attention_backward(q, k, v, p, scale, dout):
    """Gradients of ``sum(out * dout)`` with respect to ``q``, ``k``, ``v``."""
    if USE_NUMBA:
        return attention_backward_numba(q, k, v, p, q.dtype.type(scale), dout)
    return attention_backward_numpy(q, k, v, p, q.dtype.type(scale), dout)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"

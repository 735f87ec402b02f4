"""Fused row kernels for the hot elementwise ops.

Compiled with numba when it is importable; otherwise plain numpy with the
same signatures. All arrays are 2-D (rows, features) or 3-D for softmax.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_C = math.sqrt(2.0 / math.pi)
_K = 0.044715


def _rms_fwd_np(x, scale, eps):
    inv = 1.0 / np.sqrt((x * x).mean(axis=1) + eps)
    xhat = x * inv[:, None]
    return xhat * scale, xhat, inv


def _rms_bwd_np(g, xhat, inv, scale):
    gs = g * scale
    gx = inv[:, None] * (gs - xhat * (gs * xhat).mean(axis=1, keepdims=True))
    return gx, (g * xhat).sum(axis=0)


def _gelu_fwd_np(x):
    x2 = x * x
    th = np.tanh(_C * x * (1.0 + _K * x2))
    return 0.5 * x * (1.0 + th), th


def _gelu_bwd_np(g, x, th):
    dinner = _C * (1.0 + 3 * _K * x * x)
    return g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def _causal_softmax_np(x):
    t = x.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    z = np.where(mask, -np.inf, x)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd_np(g, p):
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


if HAVE_NUMBA:

    @njit(cache=True)
    def rms_fwd(x, scale, eps):
        n, d = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv = np.empty(n)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += x[i, j] * x[i, j]
            r = 1.0 / math.sqrt(acc / d + eps)
            inv[i] = r
            for j in range(d):
                h = x[i, j] * r
                xhat[i, j] = h
                out[i, j] = h * scale[j]
        return out, xhat, inv

    @njit(cache=True)
    def rms_bwd(g, xhat, inv, scale):
        n, d = g.shape
        gx = np.empty_like(g)
        gscale = np.zeros(d)
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += g[i, j] * scale[j] * xhat[i, j]
                gscale[j] += g[i, j] * xhat[i, j]
            acc /= d
            r = inv[i]
            for j in range(d):
                gx[i, j] = r * (g[i, j] * scale[j] - xhat[i, j] * acc)
        return gx, gscale

    @njit(cache=True)
    def gelu_fwd(x):
        n, d = x.shape
        out = np.empty_like(x)
        th = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                t = math.tanh(_C * v * (1.0 + _K * v * v))
                th[i, j] = t
                out[i, j] = 0.5 * v * (1.0 + t)
        return out, th

    @njit(cache=True)
    def gelu_bwd(g, x, th):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                t = th[i, j]
                dinner = _C * (1.0 + 3 * _K * v * v)
                out[i, j] = g[i, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out

    @njit(cache=True)
    def causal_softmax(x):
        b, t, _ = x.shape
        p = np.zeros_like(x)
        for k in range(b):
            for i in range(t):
                mx = x[k, i, 0]
                for j in range(1, i + 1):
                    if x[k, i, j] > mx:
                        mx = x[k, i, j]
                s = 0.0
                for j in range(i + 1):
                    e = math.exp(x[k, i, j] - mx)
                    p[k, i, j] = e
                    s += e
                for j in range(i + 1):
                    p[k, i, j] /= s
        return p

    @njit(cache=True)
    def softmax_bwd(g, p):
        b, t, u = p.shape
        out = np.empty_like(p)
        for k in range(b):
            for i in range(t):
                s = 0.0
                for j in range(u):
                    s += g[k, i, j] * p[k, i, j]
                for j in range(u):
                    out[k, i, j] = p[k, i, j] * (g[k, i, j] - s)
        return out

else:  # pragma: no cover
    rms_fwd, rms_bwd = _rms_fwd_np, _rms_bwd_np
    gelu_fwd, gelu_bwd = _gelu_fwd_np, _gelu_bwd_np
    causal_softmax, softmax_bwd = _causal_softmax_np, _softmax_bwd_np

"""Row-wise hot kernels: layer norm, GELU and softmax, forward and backward.

Two implementations share one contract: numba ``@njit`` loops and a
pure-numpy path. The numba path is the default when numba imports; set
``FMAE_DISABLE_NUMBA=1`` to force numpy, or call :func:`set_backend`.

All kernels take C-contiguous 2-D arrays ``(rows, features)``; callers
reshape. Output dtype follows the input dtype.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import erf as _erf

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def np_layer_norm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layer_norm_bwd(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def np_gelu_fwd(x):
    return 0.5 * x * (1.0 + _erf(x * _SQRT1_2))


def np_gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def np_softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def nb_layer_norm_fwd(x, gamma, beta, eps):
        rows, f = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for k in range(f):
                mu += x[r, k]
            mu /= f
            var = 0.0
            for k in range(f):
                d = x[r, k] - mu
                var += d * d
            var /= f
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for k in range(f):
                h = (x[r, k] - mu) * rs
                xhat[r, k] = h
                y[r, k] = h * gamma[k] + beta[k]
        return y, xhat, rstd

    @njit(cache=True)
    def nb_layer_norm_bwd(g, xhat, rstd, gamma):
        rows, f = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(f, dtype=g.dtype)
        dbeta = np.zeros(f, dtype=g.dtype)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for k in range(f):
                gx = g[r, k] * gamma[k]
                m1 += gx
                m2 += gx * xhat[r, k]
                dgamma[k] += g[r, k] * xhat[r, k]
                dbeta[k] += g[r, k]
            m1 /= f
            m2 /= f
            for k in range(f):
                dx[r, k] = (g[r, k] * gamma[k] - m1 - xhat[r, k] * m2) * rstd[r]
        return dx, dgamma, dbeta

    @njit(cache=True)
    def nb_gelu_fwd(x):
        rows, f = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            for k in range(f):
                v = x[r, k]
                y[r, k] = 0.5 * v * (1.0 + math.erf(v * _SQRT1_2))
        return y

    @njit(cache=True)
    def nb_gelu_bwd(x, g):
        rows, f = x.shape
        dx = np.empty_like(x)
        for r in range(rows):
            for k in range(f):
                v = x[r, k]
                cdf = 0.5 * (1.0 + math.erf(v * _SQRT1_2))
                pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
                dx[r, k] = g[r, k] * (cdf + v * pdf)
        return dx

    @njit(cache=True)
    def nb_softmax_fwd(x):
        rows, f = x.shape
        y = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for k in range(1, f):
                if x[r, k] > m:
                    m = x[r, k]
            s = 0.0
            for k in range(f):
                e = math.exp(x[r, k] - m)
                y[r, k] = e
                s += e
            for k in range(f):
                y[r, k] /= s
        return y

    @njit(cache=True)
    def nb_softmax_bwd(y, g):
        rows, f = y.shape
        dx = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for k in range(f):
                dot += g[r, k] * y[r, k]
            for k in range(f):
                dx[r, k] = y[r, k] * (g[r, k] - dot)
        return dx


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------

_NAMES = ("layer_norm_fwd", "layer_norm_bwd", "gelu_fwd", "gelu_bwd", "softmax_fwd", "softmax_bwd")
_BACKENDS = {"numpy": {n: globals()["np_" + n] for n in _NAMES}}
if HAVE_NUMBA:
    _BACKENDS["numba"] = {n: globals()["nb_" + n] for n in _NAMES}

_active: dict = {}
backend = ""


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` kernels for subsequent calls."""
    global backend
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(_BACKENDS)}")
    _active.clear()
    _active.update(_BACKENDS[name])
    backend = name


def _default_backend() -> str:
    flag = os.environ.get("FMAE_DISABLE_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes", "on") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


set_backend(_default_backend())


def layer_norm_fwd(x, gamma, beta, eps):
    return _active["layer_norm_fwd"](x, gamma, beta, eps)


def layer_norm_bwd(g, xhat, rstd, gamma):
    return _active["layer_norm_bwd"](g, xhat, rstd, gamma)


def gelu_fwd(x):
    return _active["gelu_fwd"](x)


def gelu_bwd(x, g):
    return _active["gelu_bwd"](x, g)


def softmax_fwd(x):
    return _active["softmax_fwd"](x)


def softmax_bwd(y, g):
    return _active["softmax_bwd"](y, g)

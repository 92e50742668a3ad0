"""Row-wise hot kernels: softmax, layernorm and GELU, forward and backward.

Every kernel has a numba ``@njit`` body and a pure-numpy twin with the same
signature.  ``TCJEPA_NUMBA=0`` in the environment (or ``use_numba(False)``)
selects the numpy path; by default numba is used when it imports.

All kernels take contiguous 2-D ``(rows, n)`` arrays; callers reshape.
The numba versions sum left to right, the numpy versions use numpy's
pairwise reductions, so the two backends agree to rounding, not bitwise.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    _HAVE_NUMBA = False

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def np_softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def np_layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def np_layernorm_bwd(g, xhat, rstd, gamma):
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = (gx - gx.mean(axis=1, keepdims=True)
          - xhat * (gx * xhat).mean(axis=1, keepdims=True)) * rstd[:, None]
    return dx, dgamma, dbeta


def np_gelu_fwd(x):
    """Returns (gelu(x), tanh(u)); the second output feeds the backward pass."""
    t = x * x
    t *= GELU_K
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def np_gelu_bwd(x, t, g):
    du = x * x
    du *= 3.0 * GELU_K * GELU_C
    du += GELU_C
    s = t * t
    np.subtract(1.0, s, out=s)
    s *= du
    s *= x
    s += t
    s += 1.0
    s *= 0.5
    s *= g
    return s


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def nb_softmax_fwd(x):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[r, j] *= inv
        return out

    @numba.njit(cache=True, fastmath=False)
    def nb_softmax_bwd(y, g):
        rows, n = y.shape
        out = np.empty_like(y)
        for r in range(rows):
            dot = 0.0
            for j in range(n):
                dot += g[r, j] * y[r, j]
            for j in range(n):
                out[r, j] = y[r, j] * (g[r, j] - dot)
        return out

    @numba.njit(cache=True, fastmath=False)
    def nb_layernorm_fwd(x, gamma, beta, eps):
        rows, n = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(rows, dtype=x.dtype)
        for r in range(rows):
            mu = 0.0
            for j in range(n):
                mu += x[r, j]
            mu /= n
            var = 0.0
            for j in range(n):
                d = x[r, j] - mu
                var += d * d
            var /= n
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for j in range(n):
                h = (x[r, j] - mu) * rs
                xhat[r, j] = h
                out[r, j] = h * gamma[j] + beta[j]
        return out, xhat, rstd

    @numba.njit(cache=True, fastmath=False)
    def nb_layernorm_bwd(g, xhat, rstd, gamma):
        rows, n = g.shape
        dx = np.empty_like(g)
        dgamma = np.zeros(n, dtype=g.dtype)
        dbeta = np.zeros(n, dtype=g.dtype)
        for r in range(rows):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                gx = g[r, j] * gamma[j]
                s1 += gx
                s2 += gx * xhat[r, j]
                dgamma[j] += g[r, j] * xhat[r, j]
                dbeta[j] += g[r, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                dx[r, j] = (g[r, j] * gamma[j] - s1 - xhat[r, j] * s2) * rstd[r]
        return dx, dgamma, dbeta

    @numba.njit(cache=True, fastmath=False)
    def _nb_gelu_arg(x):
        rows, n = x.shape
        u = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                u[r, j] = GELU_C * (v + GELU_K * v * v * v)
        return u

    @numba.njit(cache=True, fastmath=False)
    def _nb_gelu_out(x, t):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                out[r, j] = 0.5 * x[r, j] * (1.0 + t[r, j])
        return out

    def nb_gelu_fwd(x):
        # Without SVML, numba's per-element tanh is several times slower than
        # numpy's vectorised one, so the transcendental step stays in numpy.
        t = _nb_gelu_arg(x)
        np.tanh(t, out=t)
        return _nb_gelu_out(x, t), t

    @numba.njit(cache=True, fastmath=False)
    def nb_gelu_bwd(x, tanh_u, g):
        rows, n = x.shape
        out = np.empty_like(x)
        for r in range(rows):
            for j in range(n):
                v = x[r, j]
                t = tanh_u[r, j]
                du = GELU_C * (1.0 + 3.0 * GELU_K * v * v)
                out[r, j] = g[r, j] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out


_NUMPY_IMPL = {
    "softmax_fwd": np_softmax_fwd,
    "softmax_bwd": np_softmax_bwd,
    "layernorm_fwd": np_layernorm_fwd,
    "layernorm_bwd": np_layernorm_bwd,
    "gelu_fwd": np_gelu_fwd,
    "gelu_bwd": np_gelu_bwd,
}

if _HAVE_NUMBA:
    _NUMBA_IMPL = {
        "softmax_fwd": nb_softmax_fwd,
        "softmax_bwd": nb_softmax_bwd,
        "layernorm_fwd": nb_layernorm_fwd,
        "layernorm_bwd": nb_layernorm_bwd,
        "gelu_fwd": nb_gelu_fwd,
        "gelu_bwd": nb_gelu_bwd,
    }
else:  # pragma: no cover
    _NUMBA_IMPL = _NUMPY_IMPL


def _env_wants_numba():
    flag = os.environ.get("TCJEPA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off", "")


_active = _NUMBA_IMPL if (_HAVE_NUMBA and _env_wants_numba()) else _NUMPY_IMPL


def use_numba(enabled: bool = True) -> None:
    """Switch the process-wide kernel backend."""
    global _active
    if enabled and not _HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _active = _NUMBA_IMPL if enabled else _NUMPY_IMPL


def numba_enabled() -> bool:
    return _active is _NUMBA_IMPL and _HAVE_NUMBA


def backend_name() -> str:
    return "numba" if numba_enabled() else "numpy"


def _rows(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_fwd(x):
    return _active["softmax_fwd"](_rows(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _active["softmax_bwd"](_rows(y), _rows(g)).reshape(y.shape)


def layernorm_fwd(x, gamma, beta, eps):
    out, xhat, rstd = _active["layernorm_fwd"](
        _rows(x), np.ascontiguousarray(gamma), np.ascontiguousarray(beta), x.dtype.type(eps))
    return out.reshape(x.shape), xhat, rstd


def layernorm_bwd(g, xhat, rstd, gamma):
    dx, dgamma, dbeta = _active["layernorm_bwd"](
        _rows(g), xhat, rstd, np.ascontiguousarray(gamma))
    return dx.reshape(g.shape), dgamma, dbeta


def gelu_fwd(x):
    """(gelu(x), tanh cache) with the shape of ``x``."""
    y, t = _active["gelu_fwd"](_rows(x))
    return y.reshape(x.shape), t.reshape(x.shape)


def gelu_bwd(x, tanh_u, g):
    return _active["gelu_bwd"](_rows(x), _rows(tanh_u), _rows(g)).reshape(x.shape)

"""Numeric hot kernels with an optional numba backend.

Every kernel exists twice: a pure-numpy implementation and (when numba is
importable) an ``@njit``-compiled twin.  The active backend is chosen once at
import time from the ``TURNTRACK_BACKEND`` environment variable:

    TURNTRACK_BACKEND=numpy   force the numpy fallback
    TURNTRACK_BACKEND=numba   require numba (ImportError if missing)
    unset / "auto"            numba when importable, else numpy

``set_backend()`` rebinds at runtime; ``benchmarks/bench_backends.py`` times
the two paths against each other.  All kernels are float64 and sequential, so
results are reproducible run to run for a fixed backend.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "TURNTRACK_BACKEND"


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def _np_layernorm_bwd(x, gain, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    c1 = dxhat.mean(axis=1)
    c2 = (dxhat * xhat).mean(axis=1)
    dx = (dxhat - c1[:, None] - xhat * c2[:, None]) * rstd[:, None]
    return dx, dgain, dbias


def _np_softmax_fwd(x):
    shifted = x - x.max(axis=1)[:, None]
    e = np.exp(shifted)
    return e / e.sum(axis=1)[:, None]


def _np_softmax_bwd(y, dy):
    dot = (y * dy).sum(axis=1)
    return y * (dy - dot[:, None])


def _np_relu_fwd(x):
    return np.maximum(x, 0.0)


def _np_relu_bwd(x, dy):
    return np.where(x > 0.0, dy, 0.0)


def _np_hinge_fwd(x, labels, mask):
    # per-element hinge max(0, 1 - x*y), summed over unmasked entries.
    margin = 1.0 - x * labels
    active = (margin > 0.0) & (mask > 0.0)
    total = float(np.where(active, margin, 0.0).sum())
    return total, active.astype(np.float64)


def _np_hinge_bwd(active, labels, scale):
    return (-scale) * labels * active


def _np_adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
    # in-place fused Adam update on 1-d views.
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


_NUMPY = {
    "layernorm_fwd": _np_layernorm_fwd,
    "layernorm_bwd": _np_layernorm_bwd,
    "softmax_fwd": _np_softmax_fwd,
    "softmax_bwd": _np_softmax_bwd,
    "relu_fwd": _np_relu_fwd,
    "relu_bwd": _np_relu_bwd,
    "hinge_fwd": _np_hinge_fwd,
    "hinge_bwd": _np_hinge_bwd,
    "adam_step": _np_adam_step,
}


# ---------------------------------------------------------------------------
# numba implementations (built lazily so import works without numba)
# ---------------------------------------------------------------------------

def _build_numba():
    from numba import njit

    @njit(cache=True)
    def layernorm_fwd(x, gain, bias, eps):
        rows, cols = x.shape
        y = np.empty_like(x)
        mean = np.empty(rows)
        rstd = np.empty(rows)
        for i in range(rows):
            s = 0.0
            for j in range(cols):
                s += x[i, j]
            mu = s / cols
            sq = 0.0
            for j in range(cols):
                d = x[i, j] - mu
                sq += d * d
            r = 1.0 / np.sqrt(sq / cols + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(cols):
                y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
        return y, mean, rstd

    @njit(cache=True)
    def layernorm_bwd(x, gain, mean, rstd, dy):
        rows, cols = x.shape
        dx = np.empty_like(x)
        dgain = np.zeros(cols)
        dbias = np.zeros(cols)
        for i in range(rows):
            mu = mean[i]
            r = rstd[i]
            c1 = 0.0
            c2 = 0.0
            for j in range(cols):
                xh = (x[i, j] - mu) * r
                dxh = dy[i, j] * gain[j]
                dgain[j] += dy[i, j] * xh
                dbias[j] += dy[i, j]
                c1 += dxh
                c2 += dxh * xh
            c1 /= cols
            c2 /= cols
            for j in range(cols):
                xh = (x[i, j] - mu) * r
                dxh = dy[i, j] * gain[j]
                dx[i, j] = (dxh - c1 - xh * c2) * r
        return dx, dgain, dbias

    @njit(cache=True)
    def softmax_fwd(x):
        rows, cols = x.shape
        y = np.empty_like(x)
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(cols):
                e = np.exp(x[i, j] - mx)
                y[i, j] = e
                s += e
            for j in range(cols):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def softmax_bwd(y, dy):
        rows, cols = y.shape
        dx = np.empty_like(y)
        for i in range(rows):
            dot = 0.0
            for j in range(cols):
                dot += y[i, j] * dy[i, j]
            for j in range(cols):
                dx[i, j] = y[i, j] * (dy[i, j] - dot)
        return dx

    @njit(cache=True)
    def relu_fwd(x):
        out = x.ravel().copy()
        for i in range(out.size):
            if out[i] < 0.0:
                out[i] = 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def relu_bwd(x, dy):
        xf = x.ravel()
        df = dy.ravel()
        out = np.empty_like(df)
        for i in range(out.size):
            out[i] = df[i] if xf[i] > 0.0 else 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def hinge_fwd(x, labels, mask):
        rows, cols = x.shape
        active = np.zeros((rows, cols))
        total = 0.0
        for i in range(rows):
            for j in range(cols):
                if mask[i, j] > 0.0:
                    m = 1.0 - x[i, j] * labels[i, j]
                    if m > 0.0:
                        total += m
                        active[i, j] = 1.0
        return total, active

    @njit(cache=True)
    def hinge_bwd(active, labels, scale):
        rows, cols = active.shape
        dx = np.empty((rows, cols))
        for i in range(rows):
            for j in range(cols):
                dx[i, j] = -scale * labels[i, j] * active[i, j]
        return dx

    @njit(cache=True)
    def adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
        bc1 = 1.0 - beta1 ** t
        bc2 = 1.0 - beta2 ** t
        for i in range(p.size):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)

    return {
        "layernorm_fwd": layernorm_fwd,
        "layernorm_bwd": layernorm_bwd,
        "softmax_fwd": softmax_fwd,
        "softmax_bwd": softmax_bwd,
        "relu_fwd": relu_fwd,
        "relu_bwd": relu_bwd,
        "hinge_fwd": hinge_fwd,
        "hinge_bwd": hinge_bwd,
        "adam_step": adam_step,
    }


_numba_table = None


def _numba_available():
    try:
        import numba  # noqa: F401
        return True
    except ImportError:
        return False


def available_backends():
    backends = ["numpy"]
    if _numba_available():
        backends.append("numba")
    return backends


def set_backend(name: str) -> str:
    """Select the kernel backend ("numpy" or "numba"); returns the name set."""
    global _active, _backend, _numba_table
    if name in ("auto", ""):
        name = "numba" if _numba_available() else "numpy"
    if name == "numpy":
        _active = _NUMPY
    elif name == "numba":
        if _numba_table is None:
            _numba_table = _build_numba()
        _active = _numba_table
    else:
        raise ValueError(f"unknown backend {name!r}; expected numpy|numba|auto")
    _backend = name
    return name


def backend_name() -> str:
    return _backend


def get_table(name: str):
    """Return the raw function table for one backend (used by benchmarks)."""
    if name == "numpy":
        return _NUMPY
    if name == "numba":
        global _numba_table
        if _numba_table is None:
            _numba_table = _build_numba()
        return _numba_table
    raise ValueError(name)


_active = _NUMPY
_backend = "numpy"
set_backend(os.environ.get(_ENV_VAR, "auto"))


# thin dispatchers so callers read naturally as kernels.layernorm_fwd(...)

def layernorm_fwd(x, gain, bias, eps=1e-5):
    return _active["layernorm_fwd"](x, gain, bias, eps)


def layernorm_bwd(x, gain, mean, rstd, dy):
    return _active["layernorm_bwd"](x, gain, mean, rstd, dy)


def softmax_fwd(x):
    return _active["softmax_fwd"](x)


def softmax_bwd(y, dy):
    return _active["softmax_bwd"](y, dy)


def relu_fwd(x):
    return _active["relu_fwd"](x)


def relu_bwd(x, dy):
    return _active["relu_bwd"](x, dy)


def hinge_fwd(x, labels, mask):
    return _active["hinge_fwd"](x, labels, mask)


def hinge_bwd(active, labels, scale):
    return _active["hinge_bwd"](active, labels, scale)


def adam_step(p, g, m, v, t, lr, beta1, beta2, eps):
    _active["adam_step"](p, g, m, v, t, lr, beta1, beta2, eps)

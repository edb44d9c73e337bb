"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``PTA_DISABLE_NUMBA`` is unset (or set to ``0``/``false``). Both
paths implement identical math; they agree to floating point round-off, not
bit for bit, so a single run should stick to one backend.

All kernels take float64 C-contiguous 2-D arrays unless stated otherwise.
Gradient kernels accumulate into the ``g*`` buffers in place.
"""

import math
import os

import numpy as np

__all__ = [
    "BACKEND",
    "silu",
    "silu_grad",
    "linear_fwd",
    "linear_bwd",
    "bottleneck_fwd",
    "bottleneck_bwd",
    "adam_step",
    "numpy_kernels",
    "numba_kernels",
]


def _flag_disabled():
    val = os.environ.get("PTA_DISABLE_NUMBA", "")
    return val.strip().lower() not in ("", "0", "false", "no")


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def _np_sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _np_silu(a):
    return a * _np_sigmoid(a)


def _np_silu_grad(a, dy):
    s = _np_sigmoid(a)
    return dy * (s * (1.0 + a * (1.0 - s)))


def _np_linear_fwd(x, W, b):
    return x @ W + b


def _np_linear_bwd(x, W, dy, gW, gb):
    gW += x.T @ dy
    gb += dy.sum(axis=0)
    return dy @ W.T


def _np_bottleneck_fwd(x, W1, b1, W2, b2):
    a = x @ W1 + b1
    return x + _np_silu(a) @ W2 + b2, a


def _np_bottleneck_bwd(x, a, W1, W2, dy, gW1, gb1, gW2, gb2):
    h = _np_silu(a)
    gW2 += h.T @ dy
    gb2 += dy.sum(axis=0)
    da = _np_silu_grad(a, dy @ W2.T)
    gW1 += x.T @ da
    gb1 += da.sum(axis=0)
    return dy + da @ W1.T


def _np_adam_step(p, g, m, v, lr, beta1, beta2, eps, t):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class _Kernels:
    def __init__(self, name, **fns):
        self.name = name
        for key, fn in fns.items():
            setattr(self, key, fn)


numpy_kernels = _Kernels(
    "numpy",
    silu=_np_silu,
    silu_grad=_np_silu_grad,
    linear_fwd=_np_linear_fwd,
    linear_bwd=_np_linear_bwd,
    bottleneck_fwd=_np_bottleneck_fwd,
    bottleneck_bwd=_np_bottleneck_bwd,
    adam_step=_np_adam_step,
)

# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------


def _build_numba():
    import numba as nb

    njit = nb.njit(cache=True, nogil=True)

    @njit
    def sigmoid_(z):
        # scalar exp is cheaper than scalar tanh inside a numba loop
        if z >= 0.0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)

    @njit
    def silu_(a):
        out = np.empty_like(a)
        n, d = a.shape
        for i in range(n):
            for j in range(d):
                z = a[i, j]
                out[i, j] = z * sigmoid_(z)
        return out

    @njit
    def silu_grad_(a, dy):
        out = np.empty_like(a)
        n, d = a.shape
        for i in range(n):
            for j in range(d):
                z = a[i, j]
                s = sigmoid_(z)
                out[i, j] = dy[i, j] * (s * (1.0 + z * (1.0 - s)))
        return out

    @njit
    def add_bias_(y, b):
        n, d = y.shape
        for i in range(n):
            for j in range(d):
                y[i, j] += b[j]

    @njit
    def colsum_into_(g, dy):
        n, d = dy.shape
        for i in range(n):
            for j in range(d):
                g[j] += dy[i, j]

    @njit
    def linear_fwd_(x, W, b):
        y = np.dot(x, W)
        add_bias_(y, b)
        return y

    @njit
    def linear_bwd_(x, W, dy, gW, gb):
        gW += np.dot(x.T, dy)
        colsum_into_(gb, dy)
        return np.dot(dy, W.T)

    @njit
    def bottleneck_fwd_(x, W1, b1, W2, b2):
        a = np.dot(x, W1)
        add_bias_(a, b1)
        y = np.dot(silu_(a), W2)
        n, d = y.shape
        for i in range(n):
            for j in range(d):
                y[i, j] += x[i, j] + b2[j]
        return y, a

    @njit
    def bottleneck_bwd_(x, a, W1, W2, dy, gW1, gb1, gW2, gb2):
        h = silu_(a)
        gW2 += np.dot(h.T, dy)
        colsum_into_(gb2, dy)
        da = silu_grad_(a, np.dot(dy, W2.T))
        gW1 += np.dot(x.T, da)
        colsum_into_(gb1, da)
        return dy + np.dot(da, W1.T)

    @njit
    def adam_step_(p, g, m, v, lr, beta1, beta2, eps, t):
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(p.shape[0]):
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)

    return _Kernels(
        "numba",
        silu=silu_,
        silu_grad=silu_grad_,
        linear_fwd=linear_fwd_,
        linear_bwd=linear_bwd_,
        bottleneck_fwd=bottleneck_fwd_,
        bottleneck_bwd=bottleneck_bwd_,
        adam_step=adam_step_,
    )


try:
    numba_kernels = _build_numba()
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_kernels = None

_active = numpy_kernels if (numba_kernels is None or _flag_disabled()) else numba_kernels
BACKEND = _active.name

silu = _active.silu
silu_grad = _active.silu_grad
linear_fwd = _active.linear_fwd
linear_bwd = _active.linear_bwd
bottleneck_fwd = _active.bottleneck_fwd
bottleneck_bwd = _active.bottleneck_bwd
adam_step = _active.adam_step

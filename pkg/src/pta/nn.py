"""Minimal hand-differentiated network blocks over a flat parameter vector.

Every trainable array lives as a named view into one contiguous float64
vector (:class:`Params`). That keeps the optimizer a single fused kernel and
makes checkpoints a flat blob with named offsets.
"""

import math

import numpy as np

from pta import kernels as K
from pta.errors import ConfigError

DTYPE = np.float64


class Layout:
    """Ordered map from parameter name to (offset, shape) in a flat vector."""

    def __init__(self):
        self.entries = {}
        self.size = 0

    def add(self, name, shape):
        if name in self.entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        self.entries[name] = (self.size, shape)
        self.size += int(np.prod(shape))

    def names(self):
        return list(self.entries)

    def names_with_prefix(self, prefix):
        return [n for n in self.entries if n.startswith(prefix)]

    def slice_of(self, name):
        off, shape = self.entries[name]
        return slice(off, off + int(np.prod(shape)))

    def to_json(self):
        return [{"name": n, "offset": o, "shape": list(s)} for n, (o, s) in self.entries.items()]

    @classmethod
    def from_json(cls, items):
        lay = cls()
        for item in items:
            lay.add(item["name"], item["shape"])
            if lay.entries[item["name"]][0] != item["offset"]:
                raise ConfigError(f"offset mismatch for {item['name']!r}")
        return lay


class Params:
    """Flat parameter vector plus a same-shaped gradient buffer."""

    def __init__(self, layout, data=None):
        self.layout = layout
        self.data = np.zeros(layout.size, dtype=DTYPE) if data is None else np.ascontiguousarray(data, dtype=DTYPE)
        if self.data.shape != (layout.size,):
            raise ConfigError(f"parameter vector has size {self.data.size}, layout needs {layout.size}")
        self.grad = np.zeros_like(self.data)
        self._views = {}
        self._gviews = {}
        for name, (off, shape) in layout.entries.items():
            n = int(np.prod(shape))
            self._views[name] = self.data[off : off + n].reshape(shape)
            self._gviews[name] = self.grad[off : off + n].reshape(shape)

    def __getitem__(self, name):
        return self._views[name]

    def g(self, name):
        return self._gviews[name]

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self):
        return Params(self.layout, self.data.copy())

    def checksum(self):
        return hash(self.data.tobytes())


class Dense:
    """Affine map ``x @ W + b``."""

    def __init__(self, name, n_in, n_out, bias=True):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.bias = bias

    @property
    def W(self):
        return self.name + ".W"

    @property
    def b(self):
        return self.name + ".b"

    def register(self, layout):
        layout.add(self.W, (self.n_in, self.n_out))
        if self.bias:
            layout.add(self.b, (self.n_out,))

    def init(self, p, rng, scheme="xavier"):
        W = p[self.W]
        if scheme == "xavier":
            W[:] = rng.normal(0.0, math.sqrt(2.0 / (self.n_in + self.n_out)), W.shape)
        elif scheme == "zeros":
            W[:] = 0.0
        elif scheme == "identity":
            W[:] = np.eye(self.n_in, self.n_out)
        elif scheme == "orthogonal":
            q, r = np.linalg.qr(rng.normal(size=(max(self.n_in, self.n_out), min(self.n_in, self.n_out))))
            q = q * np.sign(np.diag(r))
            W[:] = q if self.n_in >= self.n_out else q.T
        else:
            raise ConfigError(f"unknown init scheme {scheme!r}")
        if self.bias:
            p[self.b][:] = 0.0

    def forward(self, p, x):
        if not self.bias:
            return x @ p[self.W], x
        return K.linear_fwd(x, p[self.W], p[self.b]), x

    def backward(self, p, cache, dy):
        if not self.bias:
            p.g(self.W)[:] += cache.T @ dy
            return dy @ p[self.W].T
        return K.linear_bwd(cache, p[self.W], dy, p.g(self.W), p.g(self.b))


class MLP:
    """Stack of Dense layers with SiLU between them (none after the last)."""

    def __init__(self, name, sizes):
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least input and output sizes")
        self.name = name
        self.sizes = list(sizes)
        self.layers = [Dense(f"{name}.l{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def register(self, layout):
        for layer in self.layers:
            layer.register(layout)

    def init(self, p, rng, last="xavier"):
        for layer in self.layers[:-1]:
            layer.init(p, rng)
        self.layers[-1].init(p, rng, last)

    def forward(self, p, x):
        caches = []
        h = x
        for i, layer in enumerate(self.layers):
            a, c = layer.forward(p, h)
            caches.append((c, a))
            h = K.silu(a) if i < len(self.layers) - 1 else a
        return h, caches

    def backward(self, p, caches, dy):
        d = dy
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            c, a = caches[i]
            if i < last:
                d = K.silu_grad(a, d)
            d = self.layers[i].backward(p, c, d)
        return d


class Bottleneck:
    """Residual block ``x + W2 silu(W1 x + b1) + b2`` with a narrow middle."""

    def __init__(self, name, dim, hidden=None):
        self.name = name
        self.dim = dim
        self.hidden = hidden or max(1, dim // 2)
        self.down = Dense(name + ".down", dim, self.hidden)
        self.up = Dense(name + ".up", self.hidden, dim)

    def register(self, layout):
        self.down.register(layout)
        self.up.register(layout)

    def init(self, p, rng):
        self.down.init(p, rng)
        self.up.init(p, rng)
        p[self.up.W][:] *= 0.5

    def forward(self, p, x):
        y, a = K.bottleneck_fwd(x, p[self.down.W], p[self.down.b], p[self.up.W], p[self.up.b])
        return y, (x, a)

    def backward(self, p, cache, dy):
        x, a = cache
        return K.bottleneck_bwd(
            x, a,
            p[self.down.W], p[self.up.W], dy,
            p.g(self.down.W), p.g(self.down.b), p.g(self.up.W), p.g(self.up.b),
        )


def sinusoidal_table(n_rows, dim):
    """Fixed sinusoidal embedding for integer positions ``0..n_rows-1``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    pos = np.arange(n_rows, dtype=DTYPE)[:, None]
    ang = pos * freqs[None, :]
    table = np.zeros((n_rows, dim), dtype=DTYPE)
    table[:, 0 : 2 * half : 2] = np.sin(ang)
    table[:, 1 : 2 * half : 2] = np.cos(ang)
    return table


class Adam:
    """Adam over one flat vector; moments are plain arrays so they checkpoint."""

    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(size, dtype=DTYPE)
        self.v = np.zeros(size, dtype=DTYPE)
        self.t = 0

    def step(self, p, g):
        self.t += 1
        K.adam_step(p, g, self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, float(self.t))

"""Central finite differences over flat parameter vectors."""

import numpy as np


def numeric_grad(f, x, h=1e-5, idx=None):
    """Central-difference gradient of scalar ``f`` at ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    for i in range(x.size) if idx is None else idx:
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f()
        x.flat[i] = old - h
        fm = f()
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, b):
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)

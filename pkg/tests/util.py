"""Shared test oracles.

The finite-difference oracle here is the independent reference every
reverse-mode gradient is checked against; it never touches the tape engine's
reverse pass, only repeated forward evaluation.
"""

import numpy as np

FD_STEP = 1e-5


def finite_diff(f, arrays, eps=FD_STEP):
    """Central finite differences of scalar f(*arrays) w.r.t. each array.

    f must rebuild its computation from plain numpy arrays on every call.
    """
    grads = []
    for i, base in enumerate(arrays):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = f(*arrays)
            flat[j] = orig - eps
            lo = f(*arrays)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(got, want):
    """Vector-norm relative error, robust to individual near-zero entries."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = max(np.max(np.abs(want)) if want.size else 0.0, 1e-10)
    diff = np.max(np.abs(got - want)) if want.size else 0.0
    return diff / denom

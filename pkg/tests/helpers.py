"""Finite-difference utilities shared by the gradient tests."""

import numpy as np


def numeric_grad(f, arr, eps, idx=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    indices = range(flat.size) if idx is None else idx
    out = {}
    for i in indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return out


def assert_grad_close(analytic, numeric: dict, rtol=1e-4, atol=1e-6):
    flat = np.asarray(analytic).reshape(-1)
    for i, n in numeric.items():
        a = flat[i]
        err = abs(a - n)
        assert err <= atol or err <= rtol * max(abs(a), abs(n)), f"entry {i}: analytic {a}, numeric {n}"

"""Shared numeric oracles for the test suite."""

import numpy as np


def fd_gradient(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function at a 1-D point."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += eps
        dn[i] -= eps
        grad[i] = (f(up) - f(dn)) / (2.0 * eps)
    return grad


def relative_error(approx, exact):
    """Worst-case elementwise relative error with a small absolute floor."""
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = np.maximum(np.abs(exact), 1e-8)
    return float(np.max(np.abs(approx - exact) / scale))

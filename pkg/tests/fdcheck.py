"""Finite-difference oracles shared by the gradient tests.

Relative error uses a floor in the denominator: entries whose magnitudes
sit below the floor are effectively compared absolutely against the floor
scale, which keeps central-difference roundoff (~1e-11 for O(1) losses at
h=1e-5) from tripping checks on near-zero gradients.
"""

import numpy as np


def max_rel_err(analytic, numeric, floor=1e-4):
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    num = np.abs(a - b)
    den = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((num / den).max())


def central_diff(f, x, h=1e-5):
    """Central-difference gradient of scalar f w.r.t. every entry of x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def central_diff_inplace(f, arr, h=1e-5):
    """Like central_diff but perturbs an existing array in place.

    Useful for model parameters: f() re-runs the forward with the mutated
    parameter array and the entry is restored afterwards.
    """
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad

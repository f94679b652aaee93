"""Dense float64 kernels and the RNG policy every other module builds on.

Activations and parameters are 2-D row-major float64 arrays with batch
samples in rows. Named ops validate shapes and refuse to return NaN/Inf;
everyday elementwise arithmetic stays plain numpy.
"""

import numpy as np

from .errors import NumericsError, ShapeError

DTYPE = np.float64


def make_rng(seed):
    """Deterministic generator (PCG64): same seed, same sequence, any platform."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def ensure_finite(x, what="result"):
    if not np.isfinite(x).all():
        raise NumericsError(f"non-finite values in {what}")
    return x


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return ensure_finite(a @ b, "matmul")


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def row_mean_var(x):
    """Per-row mean and biased variance (divide by the width, not width - 1)."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"row_mean_var expects a 2-D array with >= 1 column, got {x.shape}")
    return x.mean(axis=1), x.var(axis=1)


def gaussian_init(rng, shape, std, mean=0.0):
    return rng.normal(loc=mean, scale=std, size=shape).astype(DTYPE, copy=False)


def uniform_init(rng, shape, low, high):
    return rng.uniform(low=low, high=high, size=shape).astype(DTYPE, copy=False)


def glorot_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return uniform_init(rng, (fan_in, fan_out), -limit, limit)

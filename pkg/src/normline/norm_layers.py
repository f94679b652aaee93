"""Normalization layers with hand-written forward and backward passes.

Five variants over a shared core:

* ``layernorm``   h = g * (x - mu) / sqrt(var + eps) + b, moments per row
* ``simple_ln``   the same, without gain and bias
* ``vo_ln``       h = x / sqrt(var + eps); rescales by the row's standard
                  deviation but does not remove the row mean (the mean is
                  still used inside the variance)
* ``batchnorm``   per-column moments over the mini-batch; running stats
                  (exponential moving average) take over in eval mode
* ``groupnorm``   row moments within contiguous column groups, affine over
                  the full row

All moments are biased (divide by the width H, never H - 1) and epsilon
sits inside the square root so constant inputs stay finite and gradients
stay bounded. A forward pass stores its intermediates on the NormState;
each cache feeds exactly one backward pass, and a second backward without
a fresh forward is a protocol error.
"""

import numpy as np
from dataclasses import dataclass

from .errors import ConfigError, ProtocolError, ShapeError
from .numerics import DTYPE

KINDS = ("none", "batchnorm", "groupnorm", "layernorm", "simple_ln", "vo_ln")
AFFINE_KINDS = ("batchnorm", "groupnorm", "layernorm")


@dataclass
class NormSpec:
    """Which variant to apply plus its hyperparameters."""

    kind: str = "none"
    epsilon: float = 1e-8
    group_count: int = 2
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown norm kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.group_count < 1:
            raise ConfigError("group_count must be >= 1")
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError("momentum must be in (0, 1)")


class NormState:
    """Learned and running state for one normalization site.

    ``gain``/``bias`` exist only for the affine kinds, ``running_mean``/
    ``running_var`` only for batchnorm. ``cache`` holds the intermediates of
    the most recent forward pass.
    """

    def __init__(self, kind, width):
        if kind not in KINDS:
            raise ConfigError(f"unknown norm kind {kind!r}")
        self.kind = kind
        self.width = int(width)
        if kind in AFFINE_KINDS:
            self.gain = np.ones(self.width, dtype=DTYPE)
            self.bias = np.zeros(self.width, dtype=DTYPE)
        else:
            self.gain = None
            self.bias = None
        if kind == "batchnorm":
            self.running_mean = np.zeros(self.width, dtype=DTYPE)
            self.running_var = np.ones(self.width, dtype=DTYPE)
        else:
            self.running_mean = None
            self.running_var = None
        self.cache = None


def init_state(spec, width):
    """NormState for a spec, or None when no normalization is requested."""
    if spec is None or spec.kind == "none":
        return None
    return NormState(spec.kind, width)


def _check_input(x, state=None):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"normalization expects a 2-D input with >= 1 column, got {x.shape}")
    if state is not None and state.width != x.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} does not match state width {state.width}")
    return x


def _grouped_normalize(x, groups, eps):
    """Per-row moments within each contiguous group of columns.

    groups == 1 is plain per-row normalization; the group path is the only
    code path so the two agree bit for bit.
    """
    n, width = x.shape
    if width % groups != 0:
        raise ShapeError(f"group count {groups} does not divide width {width}")
    xg = x.reshape(n, groups, width // groups)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, width)
    return xhat, inv


def _grouped_backward(gxh, xhat, inv, groups):
    # d xhat / d x folded per group: inv * (g - mean(g) - xhat * mean(g * xhat))
    n, width = gxh.shape
    gg = gxh.reshape(n, groups, width // groups)
    xh = xhat.reshape(n, groups, width // groups)
    m1 = gg.mean(axis=2, keepdims=True)
    m2 = (gg * xh).mean(axis=2, keepdims=True)
    return (inv * (gg - m1 - xh * m2)).reshape(n, width)


def layer_norm_forward(x, state, eps=1e-8):
    """h = gain * (x - mu) / sqrt(var + eps) + bias, moments per row."""
    x = _check_input(x, state)
    xhat, inv = _grouped_normalize(x, 1, eps)
    state.cache = ("layernorm", xhat, inv, 1)
    return state.gain * xhat + state.bias


def group_norm_forward(x, state, groups, eps=1e-8):
    """Row-wise moments per contiguous column group, then full-width affine."""
    x = _check_input(x, state)
    xhat, inv = _grouped_normalize(x, groups, eps)
    state.cache = ("groupnorm", xhat, inv, groups)
    return state.gain * xhat + state.bias


def simple_ln_forward(x, eps=1e-8):
    """(x - mu) / sqrt(var + eps) per row; no learned parameters."""
    x = _check_input(x)
    return _grouped_normalize(x, 1, eps)[0]


def vo_ln_forward(x, eps=1e-8):
    """x / sqrt(var + eps) per row; the row mean is kept in the output."""
    x = _check_input(x)
    var = x.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return x * inv


def batch_norm_forward(x, state, eps=1e-8, training=True, momentum=0.9):
    """Per-column normalization by batch (training) or running (eval) moments.

    Training updates running stats as an exponential moving average with the
    given retain factor: running = momentum * running + (1 - momentum) * batch.
    """
    x = _check_input(x, state)
    if training:
        if x.shape[0] < 2:
            raise ProtocolError("batchnorm in training mode needs a batch of at least 2 rows")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        state.running_mean = momentum * state.running_mean + (1.0 - momentum) * mu
        state.running_var = momentum * state.running_var + (1.0 - momentum) * var
        state.cache = ("batchnorm", xhat, inv)
    else:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x - state.running_mean) * inv
        state.cache = ("batchnorm_eval", xhat, inv)
    return state.gain * xhat + state.bias


def norm_forward(x, spec, state, training=True):
    """Dispatch on spec.kind; caches intermediates on state for the backward."""
    kind = spec.kind
    if kind == "none":
        return x
    if kind == "layernorm":
        return layer_norm_forward(x, state, spec.epsilon)
    if kind == "groupnorm":
        return group_norm_forward(x, state, spec.group_count, spec.epsilon)
    if kind == "batchnorm":
        return batch_norm_forward(x, state, spec.epsilon, training, spec.momentum)
    if kind == "simple_ln":
        x = _check_input(x, state)
        xhat, inv = _grouped_normalize(x, 1, spec.epsilon)
        state.cache = ("simple_ln", xhat, inv)
        return xhat
    if kind == "vo_ln":
        x = _check_input(x, state)
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + spec.epsilon)
        state.cache = ("vo_ln", x, mu, inv)
        return x * inv
    raise ConfigError(f"unknown norm kind {kind!r}")


def norm_backward(kind, grad_out, state):
    """Exact gradients through the cached forward.

    Returns (grad_in, grad_gain, grad_bias); the affine gradients are None
    for kinds without gain/bias. Consumes the cache.
    """
    if state is None or state.cache is None:
        raise ProtocolError("norm backward called without a cached forward")
    tag = state.cache[0]
    if tag != kind and not (kind == "batchnorm" and tag == "batchnorm_eval"):
        raise ProtocolError(f"cached forward is {tag!r}, backward asked for {kind!r}")
    cache, state.cache = state.cache, None
    grad_out = np.asarray(grad_out, dtype=DTYPE)

    if kind in ("layernorm", "groupnorm"):
        _, xhat, inv, groups = cache
        grad_gain = (grad_out * xhat).sum(axis=0)
        grad_bias = grad_out.sum(axis=0)
        grad_in = _grouped_backward(grad_out * state.gain, xhat, inv, groups)
        return grad_in, grad_gain, grad_bias

    if kind == "simple_ln":
        _, xhat, inv = cache
        return _grouped_backward(grad_out, xhat, inv, 1), None, None

    if kind == "vo_ln":
        _, x, mu, inv = cache
        width = x.shape[1]
        dot = (grad_out * x).sum(axis=1, keepdims=True)
        grad_in = grad_out * inv - (x - mu) * (dot * inv**3 / width)
        return grad_in, None, None

    if kind == "batchnorm":
        _, xhat, inv = cache
        grad_gain = (grad_out * xhat).sum(axis=0)
        grad_bias = grad_out.sum(axis=0)
        gxh = grad_out * state.gain
        if tag == "batchnorm":
            m1 = gxh.mean(axis=0)
            m2 = (gxh * xhat).mean(axis=0)
            grad_in = inv * (gxh - m1 - xhat * m2)
        else:
            # eval mode: running stats are constants
            grad_in = gxh * inv
        return grad_in, grad_gain, grad_bias

    raise ConfigError(f"unknown norm kind {kind!r}")


def vo_ln_diag_derivative(x, eps=1e-8):
    """Diagonal of the Jacobian of ``x -> x / sqrt(var + eps)`` for one vector.

    Entry i is 1/s - x_i * (x_i - mu) / (s^3 * H) with s = sqrt(var + eps).
    """
    x = np.asarray(x, dtype=DTYPE).ravel()
    width = x.size
    if width < 1:
        raise ShapeError("vo_ln_diag_derivative expects a non-empty vector")
    mu = x.mean()
    s = np.sqrt(x.var() + eps)
    return 1.0 / s - x * (x - mu) / (s**3 * width)

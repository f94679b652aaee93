"""Loss, Adam, rank-based AUC, and the epoch loop with early stopping."""

import hashlib
import logging
import time
import numpy as np
from dataclasses import dataclass, field

from .errors import ConfigError, DataError, MetricError, ShapeError
from .numerics import DTYPE, make_rng

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


@dataclass
class TrainConfig:
    batch_size: int = 1000
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")


def bce_loss(probabilities, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the logits.

    Probabilities are clamped to [1e-12, 1 - 1e-12] so the log stays finite;
    the logit gradient is (p - y) / batch.
    """
    p = np.asarray(probabilities, dtype=DTYPE)
    y = np.asarray(labels, dtype=DTYPE)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {p.shape} and labels {y.shape} differ")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean()
    grad_logits = (p - y) / p.size
    return loss, grad_logits


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step(params, grads, state, cfg):
    """Standard bias-corrected update, in place on the parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads, and optimizer state must align")
    state.t += 1
    c1 = 1.0 - cfg.beta1**state.t
    c2 = 1.0 - cfg.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"parameter {p.shape} and gradient {g.shape} differ")
        m[...] = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v[...] = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


def _average_ranks(x):
    # 1-based ranks, ties get the mean rank of their group
    uniq, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = starts + (counts + 1) / 2.0
    return avg[inverse]


def auc(scores, labels):
    """Probability that a random positive outranks a random negative.

    Rank-based (Mann-Whitney); tied scores count one half per pair.
    """
    s = np.asarray(scores, dtype=DTYPE)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be matching 1-D arrays")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need at least one positive and one negative")
    ranks = _average_ranks(s)
    return (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def predict(model, dataset, batch_size=1000):
    """Eval-mode probabilities over a dataset, in row order."""
    out = np.empty(len(dataset), dtype=DTYPE)
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        _, probs = model.forward(dataset.values[start:stop], training=False)
        out[start:stop] = probs
    return out


def evaluate(model, dataset, batch_size=1000):
    """(AUC, mean BCE loss) of a model on a dataset, eval mode."""
    probs = predict(model, dataset, batch_size)
    loss, _ = bce_loss(probs, dataset.labels)
    return auc(probs, dataset.labels), loss


@dataclass
class FitResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_auc: float = float("nan")


def fit(model, train_data, valid_data, cfg, history_path=None):
    """Mini-batch Adam with per-epoch validation AUC and early stopping.

    Keeps the parameters of the best validation epoch. Stops once the count
    of consecutive epochs without improvement reaches ``patience`` (so
    patience 0 runs exactly one epoch). Row order is reshuffled every epoch
    from the run seed; a final size-1 batch is dropped (and logged) only
    when the model contains batchnorm.
    """
    if len(train_data) == 0 or len(valid_data) == 0:
        raise DataError("train and validation splits must be non-empty")
    has_bn = model.has_batchnorm()
    if has_bn and cfg.batch_size < 2:
        raise ConfigError("batch_size must be >= 2 when the model uses batchnorm")

    rng = make_rng(cfg.seed)
    params = [arr for _, arr in model.parameters()]
    adam = AdamState(params)
    result = FitResult()
    best_auc = -np.inf
    best_params = None
    bad_epochs = 0
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_data))
        loss_sum = 0.0
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            if rows.size == 1 and has_bn:
                log.info("dropping final batch of 1 row (batchnorm present)")
                continue
            if model.probe is not None:
                model.probe.step = step
            values = train_data.values[rows]
            labels = train_data.labels[rows]
            _, probs = model.forward(values, training=True)
            loss, grad_logits = bce_loss(probs, labels)
            model.backward(grad_logits)
            adam_step(params, [g for _, g in model.gradients()], adam, cfg)
            loss_sum += loss * rows.size
            seen += rows.size
            step += 1

        probe, model.probe = model.probe, None
        valid_auc, _ = evaluate(model, valid_data, cfg.batch_size)
        model.probe = probe
        seconds = time.perf_counter() - t0
        result.history.append(
            {"epoch": epoch, "train_loss": loss_sum / seen, "valid_auc": valid_auc, "seconds": seconds}
        )

        if valid_auc > best_auc:
            best_auc = valid_auc
            best_params = [p.copy() for p in params]
            result.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
        if bad_epochs >= cfg.patience:
            break

    if best_params is not None:
        for p, bp in zip(params, best_params):
            p[...] = bp
    result.best_valid_auc = best_auc
    if history_path is not None:
        save_history(result.history, history_path)
    return result


def save_history(history, path):
    """Append-style CSV log: epoch,train_loss,valid_auc,seconds."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,valid_auc,seconds\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},{row['valid_auc']!r},{row['seconds']:.3f}\n")


def history_hash(history):
    """Hash of the deterministic history columns (wall-clock excluded)."""
    h = hashlib.sha256()
    for row in history:
        h.update(f"{row['epoch']},{row['train_loss']!r},{row['valid_auc']!r}\n".encode())
    return h.hexdigest()

"""Activation-statistics recorder.

Attaching a probe never changes what the model computes; it only reads the
tensors that pass the selected sites. Per record it keeps the global mean,
the average per-unit variance (per row over the layer width, or per field
slice when a slice width is set, i.e. the quantity the row-wise norms
drive to one), the fraction of negative entries, and a fixed 64-bin
histogram over [-5, 5] with overflow folded into the end bins.

Raw per-step values are retained; an EMA (coefficient 0.99) of each
statistic is kept alongside for stable summaries.
"""

import numpy as np
from dataclasses import dataclass, field

from .errors import ConfigError, DataError

HIST_BINS = 64
HIST_RANGE = (-5.0, 5.0)
EMA_COEF = 0.99

_HIST_EDGES = np.linspace(HIST_RANGE[0], HIST_RANGE[1], HIST_BINS + 1)


@dataclass
class StatsRecord:
    layer: str
    step: int
    mean: float
    variance: float
    neg_frac: float
    hist: np.ndarray

    def __eq__(self, other):
        return (
            self.layer == other.layer
            and self.step == other.step
            and self.mean == other.mean
            and self.variance == other.variance
            and self.neg_frac == other.neg_frac
            and np.array_equal(self.hist, other.hist)
        )


def negative_fraction(x):
    """count(v < 0) / count(all)."""
    x = np.asarray(x)
    return float((x < 0).sum()) / x.size


def _histogram(x):
    clipped = np.clip(x, HIST_RANGE[0], HIST_RANGE[1])
    counts, _ = np.histogram(clipped, bins=_HIST_EDGES)
    return counts.astype(np.int64)


def tensor_stats(layer, step, x, slice_width=None):
    """One StatsRecord for a (n, width) activation matrix."""
    x = np.asarray(x)
    if slice_width:
        variance = float(x.reshape(x.shape[0], -1, slice_width).var(axis=2).mean())
    else:
        variance = float(x.var(axis=1).mean())
    return StatsRecord(
        layer=layer,
        step=int(step),
        mean=float(x.mean()),
        variance=variance,
        neg_frac=negative_fraction(x),
        hist=_histogram(x),
    )


class Probe:
    """Collects StatsRecords for a fixed set of sites."""

    def __init__(self, sites, every=1, slice_widths=None):
        self.sites = list(sites)
        self.every = max(1, int(every))
        self.slice_widths = dict(slice_widths or {})
        self.records = []
        self.ema = {}
        self.step = 0

    def wants(self, site):
        return site in self.sites

    def observe(self, site, x, slice_width=None):
        if not self.wants(site) or self.step % self.every != 0:
            return
        rec = tensor_stats(site, self.step, x, slice_width=self.slice_widths.get(site, slice_width))
        self.records.append(rec)
        prev = self.ema.get(site)
        if prev is None:
            self.ema[site] = {"mean": rec.mean, "variance": rec.variance, "neg_frac": rec.neg_frac}
        else:
            for key, val in (("mean", rec.mean), ("variance", rec.variance), ("neg_frac", rec.neg_frac)):
                prev[key] = EMA_COEF * prev[key] + (1.0 - EMA_COEF) * val

    def last(self, site):
        for rec in reversed(self.records):
            if rec.layer == site:
                return rec
        return None


def attach_probes(model, layers, every=1):
    """Instrument a model: its forward passes will emit StatsRecords.

    ``layers`` may be "all" or an iterable of site names from
    ``model.probe_sites()``; unknown names are rejected with the valid list.
    """
    valid = model.probe_sites()
    if layers == "all":
        selected = list(valid)
    else:
        selected = list(layers)
        unknown = [s for s in selected if s not in valid]
        if unknown:
            raise ConfigError(f"unknown probe layer(s) {unknown}; valid: {', '.join(valid)}")
    k = model.config.embedding_dim
    probe = Probe(selected, every=every, slice_widths={"embedding": k, "embedding_norm": k})
    model.probe = probe
    return model


def export_stats(records, path):
    """CSV report: layer,step,mean,variance,neg_frac,bin_0..bin_63."""
    with open(path, "w", encoding="utf-8") as fh:
        bins = ",".join(f"bin_{i}" for i in range(HIST_BINS))
        fh.write(f"layer,step,mean,variance,neg_frac,{bins}\n")
        for rec in records:
            counts = ",".join(str(int(c)) for c in rec.hist)
            fh.write(f"{rec.layer},{rec.step},{rec.mean!r},{rec.variance!r},{rec.neg_frac!r},{counts}\n")


def load_stats(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:5] != ["layer", "step", "mean", "variance", "neg_frac"]:
            raise DataError(f"{path}: not a stats report")
        for line in fh:
            parts = line.rstrip("\n").split(",")
            records.append(
                StatsRecord(
                    layer=parts[0],
                    step=int(parts[1]),
                    mean=float(parts[2]),
                    variance=float(parts[3]),
                    neg_frac=float(parts[4]),
                    hist=np.array([int(c) for c in parts[5:5 + HIST_BINS]], dtype=np.int64),
                )
            )
    return records


def final_stats(records):
    """Last record per layer, keyed by layer name."""
    out = {}
    for rec in records:
        out[rec.layer] = rec
    return out


def compare_reports(records_a, records_b, label_a="a", label_b="b"):
    """Plain-text table of final per-layer statistics for two runs."""
    fa, fb = final_stats(records_a), final_stats(records_b)
    layers = sorted(set(fa) | set(fb))
    header = f"{'layer':<18} {'mean_' + label_a:>12} {'mean_' + label_b:>12} {'var_' + label_a:>12} {'var_' + label_b:>12} {'neg_' + label_a:>8} {'neg_' + label_b:>8}"
    lines = [header, "-" * len(header)]
    for layer in layers:
        ra, rb = fa.get(layer), fb.get(layer)
        def fmt(rec, attr, width):
            return f"{getattr(rec, attr):>{width}.5g}" if rec is not None else " " * (width - 1) + "-"
        lines.append(
            f"{layer:<18} {fmt(ra, 'mean', 12)} {fmt(rb, 'mean', 12)} "
            f"{fmt(ra, 'variance', 12)} {fmt(rb, 'variance', 12)} "
            f"{fmt(ra, 'neg_frac', 8)} {fmt(rb, 'neg_frac', 8)}"
        )
    return "\n".join(lines)

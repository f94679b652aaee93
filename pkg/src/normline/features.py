"""Field schemas, per-field embedding tables, and field-wise normalization.

A batch is one (n, f) float64 matrix whose column j belongs to the field
with ``field_index == j``: categorical columns hold integer vocabulary ids
(index 0 is reserved for out-of-vocabulary values), numerical columns hold
raw scalar values. Each field owns one embedding block of width k and a
batch embeds to an (n, f*k) matrix with field j in columns [j*k, (j+1)*k).

Field-wise normalization treats each field's k-vector as the normalized
unit for the row-wise kinds and the field's column slice as the unit for
batchnorm; gain and bias, when present, are length-k vectors shared by
every sample of that field.
"""

import numpy as np
from dataclasses import dataclass

from .errors import DataError, ShapeError
from .norm_layers import NormSpec, init_state, norm_backward, norm_forward
from .numerics import DTYPE, gaussian_init

CATEGORICAL = "categorical"
NUMERICAL = "numerical"


@dataclass
class FieldSchema:
    name: str
    kind: str
    vocab_size: int = 0
    field_index: int = 0


def sorted_schema(schema):
    """Validate a field list and return it ordered by field_index."""
    fields = sorted(schema, key=lambda f: f.field_index)
    if [f.field_index for f in fields] != list(range(len(fields))):
        raise DataError("field_index values must be a contiguous 0..f-1 permutation")
    names = [f.name for f in fields]
    if len(set(names)) != len(names):
        raise DataError("field names must be unique")
    for f in fields:
        if f.kind not in (CATEGORICAL, NUMERICAL):
            raise DataError(f"field {f.name!r} has unknown kind {f.kind!r}")
        if f.kind == CATEGORICAL and f.vocab_size < 1:
            raise DataError(f"categorical field {f.name!r} needs vocab_size >= 1")
    return fields


class EmbeddingTable:
    """One parameter block per field: (vocab_size, k) or a single k-vector."""

    def __init__(self, schema, k, rng, init_std=0.01):
        self.fields = sorted_schema(schema)
        self.k = int(k)
        self.blocks = []
        for f in self.fields:
            if f.kind == CATEGORICAL:
                self.blocks.append(gaussian_init(rng, (f.vocab_size, self.k), init_std))
            else:
                self.blocks.append(gaussian_init(rng, (self.k,), init_std))


def embed_numerical(e, x):
    """Numerical-field embedding: the field vector scaled by the raw value."""
    if not np.isfinite(x):
        raise DataError(f"non-finite numerical value {x!r}")
    return np.asarray(e, dtype=DTYPE) * float(x)


def _int_ids(col, field):
    ids = col.astype(np.int64)
    if (ids != col).any():
        raise DataError(f"non-integer id in categorical field {field.name!r}")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= field.vocab_size:
        raise DataError(f"id out of range [0, {field.vocab_size}) in field {field.name!r}")
    return ids


def embed_batch(values, table, schema):
    """Concatenated field embeddings: (n, f) values -> (n, f*k) matrix."""
    values = np.asarray(values, dtype=DTYPE)
    fields = sorted_schema(schema)
    if values.ndim != 2 or values.shape[1] != len(fields):
        raise ShapeError(f"expected (n, {len(fields)}) values, got {values.shape}")
    n = values.shape[0]
    k = table.k
    out = np.empty((n, len(fields) * k), dtype=DTYPE)
    for f in fields:
        col = values[:, f.field_index]
        sl = slice(f.field_index * k, (f.field_index + 1) * k)
        block = table.blocks[f.field_index]
        if f.kind == CATEGORICAL:
            out[:, sl] = block[_int_ids(col, f)]
        else:
            if not np.isfinite(col).all():
                raise DataError(f"non-finite value in numerical field {f.name!r}")
            out[:, sl] = block[None, :] * col[:, None]
    return out


def embedding_backward(grad, values, table, schema):
    """Per-block parameter gradients for one embedded batch.

    Categorical rows accumulate by looked-up id (duplicates sum); rows never
    referenced in the batch get zero gradient. Numerical blocks get the
    value-weighted column sum.
    """
    grad = np.asarray(grad, dtype=DTYPE)
    values = np.asarray(values, dtype=DTYPE)
    fields = sorted_schema(schema)
    k = table.k
    if grad.shape != (values.shape[0], len(fields) * k):
        raise ShapeError(f"gradient shape {grad.shape} does not match batch layout")
    grads = []
    for f in fields:
        col = values[:, f.field_index]
        gslice = grad[:, f.field_index * k:(f.field_index + 1) * k]
        if f.kind == CATEGORICAL:
            g = np.zeros_like(table.blocks[f.field_index])
            np.add.at(g, _int_ids(col, f), gslice)
        else:
            g = (col[:, None] * gslice).sum(axis=0)
        grads.append(g)
    return grads


class FieldNormPlan:
    """Normalization choice per field kind, with one NormState per field."""

    def __init__(self, schema, k, numerical=None, categorical=None):
        self.fields = sorted_schema(schema)
        self.k = int(k)
        self.numerical = numerical if numerical is not None else NormSpec("none")
        self.categorical = categorical if categorical is not None else NormSpec("none")
        self.states = [init_state(self.spec_for(f), self.k) for f in self.fields]

    def spec_for(self, field):
        return self.numerical if field.kind == NUMERICAL else self.categorical

    def is_noop(self):
        return self.numerical.kind == "none" and self.categorical.kind == "none"


def normalize_fields(v, plan, schema, training=True):
    """Apply the plan to each field slice independently."""
    v = np.asarray(v, dtype=DTYPE)
    fields = sorted_schema(schema)
    if v.ndim != 2 or v.shape[1] != len(fields) * plan.k:
        raise ShapeError(f"expected width {len(fields) * plan.k}, got {v.shape}")
    if plan.is_noop():
        return v
    out = v.copy()
    k = plan.k
    for f in fields:
        spec = plan.spec_for(f)
        if spec.kind == "none":
            continue
        sl = slice(f.field_index * k, (f.field_index + 1) * k)
        out[:, sl] = norm_forward(v[:, sl], spec, plan.states[f.field_index], training)
    return out


def fields_backward(grad, plan, schema):
    """Gradients through the field normalizations.

    Returns (grad wrt the raw embedding matrix, per-field (grad_gain,
    grad_bias) list with (None, None) where the field has no affine params).
    """
    grad = np.asarray(grad, dtype=DTYPE)
    fields = sorted_schema(schema)
    k = plan.k
    affine = []
    if plan.is_noop():
        return grad, [(None, None) for _ in fields]
    out = grad.copy()
    for f in fields:
        spec = plan.spec_for(f)
        if spec.kind == "none":
            affine.append((None, None))
            continue
        sl = slice(f.field_index * k, (f.field_index + 1) * k)
        gi, gg, gb = norm_backward(spec.kind, grad[:, sl], plan.states[f.field_index])
        out[:, sl] = gi
        affine.append((gg, gb))
    return out, affine


def save_vocab(vocabs, path):
    """Write vocabularies as ``field_name<TAB>raw_value<TAB>index`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for field_name in vocabs:
            for value, index in sorted(vocabs[field_name].items(), key=lambda kv: kv[1]):
                fh.write(f"{field_name}\t{value}\t{index}\n")


def load_vocab(path):
    vocabs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns")
            field_name, value, index = parts
            vocabs.setdefault(field_name, {})[value] = int(index)
    return vocabs

"""Dataset ingestion, deterministic splitting, and a synthetic generator.

The TSV layout follows the common display-ads convention: label in the
first column, then every numerical field, then every categorical field
(gzip-transparent). Vocabularies are built from the training split only;
index 0 of every categorical vocabulary is reserved for out-of-vocabulary
values, and values seen fewer than ``min_freq`` times collapse to it.

The synthetic generator draws categorical ids from a power-law over ranks
so low-frequency values dominate the tail, and labels from a logistic
ground truth with pairwise interaction terms; the ground-truth scores ride
along for oracle comparisons.
"""

import gzip
import hashlib
import json
import logging
import numpy as np
from dataclasses import dataclass, replace

from .errors import DataError
from .features import CATEGORICAL, NUMERICAL, FieldSchema, sorted_schema
from .numerics import DTYPE, make_rng, sigmoid

log = logging.getLogger(__name__)

OOV_INDEX = 0


@dataclass
class Dataset:
    """Encoded rows: (n, f) float64 values plus 0/1 labels.

    Categorical columns hold vocabulary ids (exact integers stored as
    floats); numerical columns hold raw values. ``truth`` carries the
    generator's ground-truth scores for synthetic data.
    """

    schema: list
    values: np.ndarray
    labels: np.ndarray
    truth: np.ndarray = None

    def __len__(self):
        return self.values.shape[0]

    def take(self, rows):
        return Dataset(
            schema=self.schema,
            values=self.values[rows],
            labels=self.labels[rows],
            truth=None if self.truth is None else self.truth[rows],
        )

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<f8").tobytes())
        return h.hexdigest()


def load_schema_file(path):
    """Schema file: one ``name kind [vocab_hint]`` per line; kind is cat|num."""
    fields = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise DataError(f"{path}:{lineno}: expected 'name kind [vocab_hint]'")
            name, kind = parts[0], parts[1].lower()
            if kind in ("cat", "categorical"):
                kind = CATEGORICAL
            elif kind in ("num", "numerical"):
                kind = NUMERICAL
            else:
                raise DataError(f"{path}:{lineno}: unknown field kind {parts[1]!r}")
            hint = int(parts[2]) if len(parts) == 3 else 0
            fields.append(FieldSchema(name=name, kind=kind, vocab_size=hint, field_index=len(fields)))
    if not fields:
        raise DataError(f"{path}: empty schema")
    return fields


def _split_sizes(n):
    n_train = int(round(n * 0.8))
    n_valid = int(round(n * 0.1))
    n_test = n - n_train - n_valid
    return n_train, n_valid, n_test


def split_811(dataset, seed):
    """Disjoint, exhaustive 8:1:1 split, deterministic per seed."""
    n = len(dataset)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    n_train, n_valid, _ = _split_sizes(n)
    perm = make_rng(seed).permutation(n)
    return (
        dataset.take(perm[:n_train]),
        dataset.take(perm[n_train:n_train + n_valid]),
        dataset.take(perm[n_train + n_valid:]),
    )


# -- TSV ingestion ---------------------------------------------------------


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, encoding="utf-8")


@dataclass
class IngestResult:
    train: Dataset
    valid: Dataset
    test: Dataset
    vocabs: dict
    schema: list
    missing_numerical: int
    dataset_hash: str


def ingest_tsv(path, schema, seed=0, min_freq=10, log_transform=False):
    """Parse a labeled TSV, split 8:1:1, build vocabularies on train only.

    Numerical fields must precede categorical fields in the schema, matching
    the column layout. Missing numericals impute to 0 (the field's embedding
    contribution then vanishes); missing or rare categoricals map to the
    OOV index 0.
    """
    fields = sorted_schema(schema)
    num_fields = [f for f in fields if f.kind == NUMERICAL]
    cat_fields = [f for f in fields if f.kind == CATEGORICAL]
    if [f.field_index for f in num_fields] != list(range(len(num_fields))):
        raise DataError("numerical fields must precede categorical fields (TSV column layout)")

    labels = []
    num_rows = []
    cat_rows = []
    missing_numerical = 0
    with _open_maybe_gzip(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 1 + len(fields):
                raise DataError(f"{path}:{lineno}: expected {1 + len(fields)} columns, got {len(parts)}")
            if parts[0] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {parts[0]!r}")
            labels.append(float(parts[0]))
            nums = []
            for j, raw in enumerate(parts[1:1 + len(num_fields)]):
                if raw == "":
                    missing_numerical += 1
                    nums.append(0.0)
                    continue
                try:
                    nums.append(float(raw))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad numerical value {raw!r}") from None
            num_rows.append(nums)
            cat_rows.append(parts[1 + len(num_fields):])
    if missing_numerical:
        log.info("imputed %d missing numerical values to 0", missing_numerical)

    n = len(labels)
    if n < 10:
        raise DataError(f"need at least 10 records, got {n}")
    n_train, n_valid, _ = _split_sizes(n)
    perm = make_rng(seed).permutation(n)
    train_rows = perm[:n_train]

    # vocabulary from the training split only: keep values seen >= min_freq
    # times, indices assigned in order of first occurrence, 0 reserved for OOV
    vocabs = {}
    for ci, f in enumerate(cat_fields):
        counts = {}
        first_seen = {}
        for pos, r in enumerate(train_rows):
            v = cat_rows[r][ci]
            if v == "":
                continue
            counts[v] = counts.get(v, 0) + 1
            if v not in first_seen:
                first_seen[v] = pos
        kept = sorted((v for v, c in counts.items() if c >= min_freq), key=lambda v: (first_seen[v], v))
        vocabs[f.name] = {v: i + 1 for i, v in enumerate(kept)}

    resolved = []
    for f in fields:
        if f.kind == CATEGORICAL:
            resolved.append(replace(f, vocab_size=len(vocabs[f.name]) + 1))
        else:
            resolved.append(f)

    values = np.zeros((n, len(fields)), dtype=DTYPE)
    if num_fields:
        nums = np.asarray(num_rows, dtype=DTYPE)
        if log_transform:
            nonneg = nums >= 0
            nums[nonneg] = np.log1p(nums[nonneg])
        values[:, :len(num_fields)] = nums
    for ci, f in enumerate(cat_fields):
        vocab = vocabs[f.name]
        values[:, f.field_index] = [vocab.get(row[ci], OOV_INDEX) for row in cat_rows]

    full = Dataset(schema=resolved, values=values, labels=np.asarray(labels, dtype=DTYPE))
    train = full.take(train_rows)
    valid = full.take(perm[n_train:n_train + n_valid])
    test = full.take(perm[n_train + n_valid:])
    return IngestResult(
        train=train,
        valid=valid,
        test=test,
        vocabs=vocabs,
        schema=resolved,
        missing_numerical=missing_numerical,
        dataset_hash=full.content_hash(),
    )


# -- synthetic generator -----------------------------------------------------


@dataclass
class SyntheticSpec:
    """Controls for the long-tail CTR generator.

    Categorical ids are drawn from a power-law over ranks (exponent 0 is
    uniform). The ground truth scores a record by per-field latent values
    (standard normals per categorical id, the raw value for numericals)
    through linear terms plus pairwise interactions, then labels are
    Bernoulli(sigmoid(score + noise)).
    """

    n_categorical: int = 10
    n_numerical: int = 5
    vocab_size: int = 1000
    freq_exponent: float = 1.2
    linear_scale: float = 1.0
    interaction_scale: float = 0.5
    noise: float = 1.0
    n_samples: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.freq_exponent < 0:
            raise DataError("freq_exponent must be >= 0")
        if self.n_samples < 1:
            raise DataError("n_samples must be >= 1")
        if self.n_categorical > 0 and self.vocab_size < 2:
            raise DataError("vocab_size must be >= 2 (index 0 is reserved)")


def zipf_weights(n_values, exponent):
    """Normalized power-law mass over ranks 1..n_values."""
    ranks = np.arange(1, n_values + 1, dtype=DTYPE)
    w = ranks**-float(exponent)
    return w / w.sum()


def synthetic_schema(spec):
    fields = []
    for i in range(spec.n_numerical):
        fields.append(FieldSchema(name=f"num{i}", kind=NUMERICAL, field_index=len(fields)))
    for i in range(spec.n_categorical):
        fields.append(
            FieldSchema(name=f"cat{i}", kind=CATEGORICAL, vocab_size=spec.vocab_size, field_index=len(fields))
        )
    return fields


def generate_synthetic(spec):
    """Reproducible synthetic CTR dataset with long-tail categorical ids."""
    rng = make_rng(spec.seed)
    schema = synthetic_schema(spec)
    n = spec.n_samples
    f = len(schema)

    values = np.zeros((n, f), dtype=DTYPE)
    latent = np.zeros((n, f), dtype=DTYPE)
    if spec.n_numerical:
        x = rng.standard_normal((n, spec.n_numerical))
        values[:, :spec.n_numerical] = x
        latent[:, :spec.n_numerical] = x
    if spec.n_categorical:
        weights = zipf_weights(spec.vocab_size - 1, spec.freq_exponent)
        for i in range(spec.n_categorical):
            col = spec.n_numerical + i
            ids = rng.choice(spec.vocab_size - 1, size=n, p=weights) + 1
            values[:, col] = ids
            id_latents = rng.standard_normal(spec.vocab_size)
            latent[:, col] = id_latents[ids]

    linear = rng.standard_normal(f) * spec.linear_scale
    pair = rng.standard_normal((f, f)) * spec.interaction_scale
    pair = np.triu(pair, k=1)
    pair = pair + pair.T  # symmetric, zero diagonal

    score = latent @ linear + 0.5 * ((latent @ pair) * latent).sum(axis=1)
    noisy = score + spec.noise * rng.standard_normal(n)
    labels = (rng.random(n) < sigmoid(noisy)).astype(DTYPE)
    return Dataset(schema=schema, values=values, labels=labels, truth=score)


# -- npz persistence -----------------------------------------------------------


def save_dataset(dataset, path):
    meta = json.dumps(
        {
            "schema": [
                {"name": f.name, "kind": f.kind, "vocab_size": f.vocab_size, "field_index": f.field_index}
                for f in dataset.schema
            ]
        }
    )
    arrays = {"values": dataset.values, "labels": dataset.labels, "meta": np.array(meta)}
    if dataset.truth is not None:
        arrays["truth"] = dataset.truth
    np.savez(path, **arrays)


def load_dataset(path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        schema = [FieldSchema(**f) for f in meta["schema"]]
        truth = z["truth"] if "truth" in z.files else None
        return Dataset(schema=schema, values=z["values"], labels=z["labels"], truth=truth)

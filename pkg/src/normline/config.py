"""Experiment configuration: INI parsing, validation, resolved snapshots.

The config file is a single INI document with [data], [model], [train],
[probe], and [grid] sections. Every key has a default; the resolved
(defaults-filled) snapshot is written back into each run directory so a run
is self-describing. Unknown sections, unknown keys, and out-of-enum values
are rejected with the offending name.
"""

import configparser
import hashlib
import io

from .data import SyntheticSpec
from .errors import ConfigError
from .network import MODEL_KINDS, ModelConfig, resolve_norm_dnn_config
from .norm_layers import KINDS, NormSpec
from .train import TrainConfig

DEFAULTS = {
    "data": {
        "source": "synthetic",
        "split_seed": "0",
        "categorical_fields": "10",
        "numerical_fields": "5",
        "vocab_size": "1000",
        "freq_exponent": "1.2",
        "linear_scale": "1.0",
        "interaction_scale": "0.5",
        "noise": "1.0",
        "samples": "10000",
        "data_seed": "0",
        "schema": "",
        "min_freq": "10",
        "log_transform": "false",
    },
    "model": {
        "kind": "dnn",
        "embedding_dim": "10",
        "mlp_widths": "400,400,400",
        "numerical_norm": "none",
        "categorical_norm": "none",
        "mlp_norm": "none",
        "placement": "before",
        "init_std": "0.01",
        "epsilon": "1e-8",
        "group_count": "2",
        "momentum": "0.9",
    },
    "train": {
        "batch_size": "1000",
        "learning_rate": "0.0001",
        "max_epochs": "20",
        "patience": "3",
        "seed": "0",
    },
    "probe": {
        "layers": "",
        "every": "10",
    },
    "grid": {
        "emb_norms": "none",
        "mlp_norms": "none",
        "seeds": "0",
    },
}


def _convert(section, key, value, kind):
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        if kind is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {value!r} as {kind.__name__}") from None


def _int_list(section, key, value):
    if not value.strip():
        return []
    return [_convert(section, key, part.strip(), int) for part in value.split(",")]


def _str_list(value):
    return [part.strip() for part in value.split(",") if part.strip()]


class ExperimentConfig:
    """Typed view over a resolved INI config."""

    def __init__(self, raw):
        self.raw = raw
        d, m, t, p, g = raw["data"], raw["model"], raw["train"], raw["probe"], raw["grid"]

        self.source = d["source"]
        self.split_seed = _convert("data", "split_seed", d["split_seed"], int)
        self.schema_path = d["schema"]
        self.min_freq = _convert("data", "min_freq", d["min_freq"], int)
        self.log_transform = _convert("data", "log_transform", d["log_transform"], bool)

        self.kind = m["kind"]
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"[model] kind: unknown model {self.kind!r}; allowed: {', '.join(MODEL_KINDS)}")
        self.embedding_dim = _convert("model", "embedding_dim", m["embedding_dim"], int)
        self.mlp_widths = tuple(_int_list("model", "mlp_widths", m["mlp_widths"]))
        if not self.mlp_widths:
            raise ConfigError("[model] mlp_widths: need at least one hidden width")
        self.placement = m["placement"]
        if self.placement not in ("before", "after"):
            raise ConfigError(f"[model] placement: unknown value {self.placement!r}; allowed: before, after")
        self.init_std = _convert("model", "init_std", m["init_std"], float)
        self._epsilon = _convert("model", "epsilon", m["epsilon"], float)
        self._group_count = _convert("model", "group_count", m["group_count"], int)
        self._momentum = _convert("model", "momentum", m["momentum"], float)
        self.numerical_norm = self._norm_spec("numerical_norm", m["numerical_norm"])
        self.categorical_norm = self._norm_spec("categorical_norm", m["categorical_norm"])
        self.mlp_norm = self._norm_spec("mlp_norm", m["mlp_norm"])

        self.batch_size = _convert("train", "batch_size", t["batch_size"], int)
        self.learning_rate = _convert("train", "learning_rate", t["learning_rate"], float)
        self.max_epochs = _convert("train", "max_epochs", t["max_epochs"], int)
        self.patience = _convert("train", "patience", t["patience"], int)
        self.seed = _convert("train", "seed", t["seed"], int)

        self.probe_layers = p["layers"].strip()
        self.probe_every = _convert("probe", "every", p["every"], int)

        self.grid_emb_norms = [self._norm_name("emb_norms", n) for n in _str_list(g["emb_norms"])]
        self.grid_mlp_norms = [self._norm_name("mlp_norms", n) for n in _str_list(g["mlp_norms"])]
        self.grid_seeds = _int_list("grid", "seeds", g["seeds"])

    def _norm_name(self, key, name):
        if name not in KINDS:
            raise ConfigError(f"[grid] {key}: unknown norm name {name!r}; allowed: {', '.join(KINDS)}")
        return name

    def _norm_spec(self, key, name):
        if name not in KINDS:
            raise ConfigError(f"[model] {key}: unknown norm name {name!r}; allowed: {', '.join(KINDS)}")
        return NormSpec(name, epsilon=self._epsilon, group_count=self._group_count, momentum=self._momentum)

    # -- derived objects -----------------------------------------------------

    def synthetic_spec(self):
        d = self.raw["data"]
        return SyntheticSpec(
            n_categorical=_convert("data", "categorical_fields", d["categorical_fields"], int),
            n_numerical=_convert("data", "numerical_fields", d["numerical_fields"], int),
            vocab_size=_convert("data", "vocab_size", d["vocab_size"], int),
            freq_exponent=_convert("data", "freq_exponent", d["freq_exponent"], float),
            linear_scale=_convert("data", "linear_scale", d["linear_scale"], float),
            interaction_scale=_convert("data", "interaction_scale", d["interaction_scale"], float),
            noise=_convert("data", "noise", d["noise"], float),
            n_samples=_convert("data", "samples", d["samples"], int),
            seed=_convert("data", "data_seed", d["data_seed"], int),
        )

    def model_config(self, seed):
        cfg = ModelConfig(
            kind=self.kind,
            embedding_dim=self.embedding_dim,
            mlp_widths=self.mlp_widths,
            numerical_norm=self.numerical_norm,
            categorical_norm=self.categorical_norm,
            mlp_norm=self.mlp_norm,
            placement=self.placement,
            init_seed=seed,
            init_std=self.init_std,
        )
        return resolve_norm_dnn_config(cfg)

    def train_config(self, seed):
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
        )

    def set_grid_cell(self, emb_norm, mlp_norm):
        """Specialize the [model] norms for one grid cell."""
        self.raw["model"]["numerical_norm"] = emb_norm
        self.raw["model"]["categorical_norm"] = emb_norm
        self.raw["model"]["mlp_norm"] = mlp_norm
        self.numerical_norm = self._norm_spec("numerical_norm", emb_norm)
        self.categorical_norm = self._norm_spec("categorical_norm", emb_norm)
        self.mlp_norm = self._norm_spec("mlp_norm", mlp_norm)

    def set_seed(self, seed):
        self.raw["train"]["seed"] = str(seed)
        self.seed = seed

    # -- snapshots -------------------------------------------------------------

    def snapshot_text(self):
        buf = io.StringIO()
        for section in DEFAULTS:
            buf.write(f"[{section}]\n")
            for key in DEFAULTS[section]:
                buf.write(f"{key} = {self.raw[section][key]}\n")
            buf.write("\n")
        return buf.getvalue()

    def write_snapshot(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.snapshot_text())

    def config_hash(self):
        return hashlib.sha256(self.snapshot_text().encode()).hexdigest()


def load_config(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    raw = {section: dict(DEFAULTS[section]) for section in DEFAULTS}
    for section in parser.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"[{section}]: unknown section; allowed: {', '.join(DEFAULTS)}")
        for key, value in parser.items(section):
            if key not in DEFAULTS[section]:
                raise ConfigError(f"[{section}] {key}: unknown key; allowed: {', '.join(DEFAULTS[section])}")
            raw[section][key] = value
    return ExperimentConfig(raw)

"""Model assembly: embedding front end, MLP stack, optional FM branch.

Three templates share the same parts. ``dnn`` is a plain MLP over the
concatenated field embeddings; ``deepfm`` adds a factorization-machine
branch that shares the embedding table but always reads the embeddings
*before* field normalization; ``normdnn`` is the combined recipe of
LayerNorm or variance-only LayerNorm on numerical-field embeddings,
BatchNorm on categorical-field embeddings, and variance-only LayerNorm
before each hidden ReLU.

Backward passes are hand-written per layer; every parameter lives in one
flat registry so the optimizer can update arrays in place.
"""

import hashlib
import json
import struct
import numpy as np
from dataclasses import asdict, dataclass, field, replace

from .errors import CheckpointError, ConfigError, ProtocolError, ShapeError
from .features import (
    CATEGORICAL,
    EmbeddingTable,
    FieldNormPlan,
    FieldSchema,
    embed_batch,
    embedding_backward,
    fields_backward,
    normalize_fields,
    sorted_schema,
)
from .norm_layers import NormSpec, init_state, norm_backward, norm_forward
from .numerics import DTYPE, glorot_uniform, make_rng, sigmoid

PLACEMENTS = ("before", "after", "none")
ACTIVATIONS = ("relu", "identity")

MODEL_KINDS = ("dnn", "deepfm", "normdnn")


@dataclass
class MlpLayerSpec:
    in_width: int
    out_width: int
    norm: NormSpec = field(default_factory=NormSpec)
    placement: str = "before"
    activation: str = "relu"

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {self.placement!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")


class MlpLayer:
    """Affine -> [norm if before] -> activation -> [norm if after]."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.W = glorot_uniform(rng, spec.in_width, spec.out_width)
        self.b = np.zeros(spec.out_width, dtype=DTYPE)
        self.norm_state = init_state(spec.norm, spec.out_width)
        self._cache = None
        self.last_pre_activation = None
        self.last_output = None

    def _applies_norm(self):
        return self.spec.norm.kind != "none" and self.spec.placement != "none"

    def forward(self, x, training=True):
        if x.shape[1] != self.spec.in_width:
            raise ShapeError(f"layer expects width {self.spec.in_width}, got {x.shape[1]}")
        pre = x @ self.W + self.b
        z = pre
        if self._applies_norm() and self.spec.placement == "before":
            z = norm_forward(pre, self.spec.norm, self.norm_state, training)
        a = np.maximum(z, 0.0) if self.spec.activation == "relu" else z
        out = a
        if self._applies_norm() and self.spec.placement == "after":
            out = norm_forward(a, self.spec.norm, self.norm_state, training)
        self._cache = (x, z)
        self.last_pre_activation = z
        self.last_output = out
        return out

    def backward(self, grad_out):
        if self._cache is None:
            raise ProtocolError("layer backward without a matching forward")
        x, z = self._cache
        self._cache = None
        g = grad_out
        grad_gain = grad_bias = None
        if self._applies_norm() and self.spec.placement == "after":
            g, grad_gain, grad_bias = norm_backward(self.spec.norm.kind, g, self.norm_state)
        if self.spec.activation == "relu":
            g = g * (z > 0)
        if self._applies_norm() and self.spec.placement == "before":
            g, grad_gain, grad_bias = norm_backward(self.spec.norm.kind, g, self.norm_state)
        grad_W = x.T @ g
        grad_b = g.sum(axis=0)
        grad_x = g @ self.W.T
        return grad_x, grad_W, grad_b, grad_gain, grad_bias


class FmBranch:
    """First-order weights plus pairwise inner products of field embeddings."""

    def __init__(self, schema):
        self.fields = sorted_schema(schema)
        self.weights = []
        for f in self.fields:
            size = f.vocab_size if f.kind == CATEGORICAL else 1
            self.weights.append(np.zeros(size, dtype=DTYPE))
        self._cache = None

    def forward(self, values, emb_raw, k):
        n = emb_raw.shape[0]
        V = emb_raw.reshape(n, len(self.fields), k)
        S = V.sum(axis=1)
        second = 0.5 * ((S**2).sum(axis=1) - (V**2).sum(axis=(1, 2)))
        first = np.zeros(n, dtype=DTYPE)
        for f in self.fields:
            col = values[:, f.field_index]
            w = self.weights[f.field_index]
            if f.kind == CATEGORICAL:
                first += w[col.astype(np.int64)]
            else:
                first += w[0] * col
        self._cache = (values, V, S)
        return first + second

    def backward(self, grad_logits):
        if self._cache is None:
            raise ProtocolError("fm backward without a matching forward")
        values, V, S = self._cache
        self._cache = None
        n, f, k = V.shape
        g = grad_logits[:, None, None]
        grad_emb = ((S[:, None, :] - V) * g).reshape(n, f * k)
        wgrads = []
        for fld in self.fields:
            col = values[:, fld.field_index]
            if fld.kind == CATEGORICAL:
                wg = np.zeros_like(self.weights[fld.field_index])
                np.add.at(wg, col.astype(np.int64), grad_logits)
            else:
                wg = np.array([(grad_logits * col).sum()], dtype=DTYPE)
            wgrads.append(wg)
        return grad_emb, wgrads


@dataclass
class ModelConfig:
    kind: str = "dnn"
    embedding_dim: int = 10
    mlp_widths: tuple = (400, 400, 400)
    numerical_norm: NormSpec = field(default_factory=NormSpec)
    categorical_norm: NormSpec = field(default_factory=NormSpec)
    mlp_norm: NormSpec = field(default_factory=NormSpec)
    placement: str = "before"
    init_seed: int = 0
    init_std: float = 0.01

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {', '.join(MODEL_KINDS)}")
        if self.placement not in ("before", "after"):
            raise ConfigError(f"unknown placement {self.placement!r}")
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)

    def to_dict(self):
        d = asdict(self)
        d["mlp_widths"] = list(self.mlp_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("numerical_norm", "categorical_norm", "mlp_norm"):
            d[key] = NormSpec(**d[key])
        d["mlp_widths"] = tuple(d["mlp_widths"])
        return cls(**d)


class ModelGraph:
    """One trainable model: embedding table, field norms, MLP, optional FM."""

    def __init__(self, schema, config):
        self.schema = sorted_schema(schema)
        self.config = config
        k = config.embedding_dim
        rng = make_rng(config.init_seed)
        self.table = EmbeddingTable(self.schema, k, rng, config.init_std)
        self.field_plan = FieldNormPlan(
            self.schema, k, numerical=config.numerical_norm, categorical=config.categorical_norm
        )
        in_width = len(self.schema) * k
        self.layers = []
        widths = list(config.mlp_widths)
        prev = in_width
        for w in widths:
            self.layers.append(
                MlpLayer(
                    MlpLayerSpec(prev, w, norm=config.mlp_norm, placement=config.placement),
                    rng,
                )
            )
            prev = w
        # output layer: identity activation, no norm, feeds sigmoid + loss
        self.layers.append(
            MlpLayer(MlpLayerSpec(prev, 1, norm=NormSpec("none"), placement="none", activation="identity"), rng)
        )
        self.fm = FmBranch(self.schema) if config.kind == "deepfm" else None
        self.probe = None
        self.last_fm_logits = None
        self._cache = None
        self._build_registry()

    # -- parameter registry -------------------------------------------------

    def _build_registry(self):
        self._order = []
        self._params = {}
        for f in self.schema:
            self._register(f"emb.{f.name}", self.table.blocks[f.field_index])
        if self.fm is not None:
            for f in self.schema:
                self._register(f"fm.{f.name}", self.fm.weights[f.field_index])
        for f in self.schema:
            st = self.field_plan.states[f.field_index]
            if st is not None and st.gain is not None:
                self._register(f"fieldnorm.{f.name}.gain", st.gain)
                self._register(f"fieldnorm.{f.name}.bias", st.bias)
        for i, layer in enumerate(self.layers):
            self._register(f"mlp{i}.W", layer.W)
            self._register(f"mlp{i}.b", layer.b)
            st = layer.norm_state
            if st is not None and st.gain is not None:
                self._register(f"mlp{i}.gain", st.gain)
                self._register(f"mlp{i}.bias", st.bias)
        self._grads = {name: np.zeros_like(self._params[name]) for name in self._order}

    def _register(self, name, array):
        self._order.append(name)
        self._params[name] = array

    def parameters(self):
        return [(name, self._params[name]) for name in self._order]

    def gradients(self):
        return [(name, self._grads[name]) for name in self._order]

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0.0

    def has_batchnorm(self):
        states = list(self.field_plan.states) + [l.norm_state for l in self.layers]
        return any(st is not None and st.kind == "batchnorm" for st in states)

    def state_arrays(self):
        """Parameters plus running statistics, in fixed graph order."""
        items = self.parameters()
        for f in self.schema:
            st = self.field_plan.states[f.field_index]
            if st is not None and st.running_mean is not None:
                items.append((f"fieldnorm.{f.name}.running_mean", st.running_mean))
                items.append((f"fieldnorm.{f.name}.running_var", st.running_var))
        for i, layer in enumerate(self.layers):
            st = layer.norm_state
            if st is not None and st.running_mean is not None:
                items.append((f"mlp{i}.running_mean", st.running_mean))
                items.append((f"mlp{i}.running_var", st.running_var))
        return items

    # -- probes --------------------------------------------------------------

    def probe_sites(self):
        sites = ["embedding", "embedding_norm"]
        for i in range(len(self.layers)):
            sites.append(f"mlp{i}.pre")
            sites.append(f"mlp{i}.post")
        return sites

    def _observe(self, site, x, slice_width=None):
        if self.probe is not None:
            self.probe.observe(site, x, slice_width=slice_width)

    # -- forward / backward ---------------------------------------------------

    def forward(self, values, training=True):
        """Returns (logits, probabilities) for a (n, f) value matrix."""
        values = np.asarray(values, dtype=DTYPE)
        k = self.config.embedding_dim
        emb_raw = embed_batch(values, self.table, self.schema)
        fm_logits = None
        if self.fm is not None:
            fm_logits = self.fm.forward(values, emb_raw, k)
        emb = normalize_fields(emb_raw, self.field_plan, self.schema, training)
        self._observe("embedding", emb_raw, slice_width=k)
        self._observe("embedding_norm", emb, slice_width=k)
        h = emb
        for i, layer in enumerate(self.layers):
            h = layer.forward(h, training)
            self._observe(f"mlp{i}.pre", layer.last_pre_activation)
            self._observe(f"mlp{i}.post", layer.last_output)
        logits = h[:, 0]
        if fm_logits is not None:
            logits = logits + fm_logits
        self.last_fm_logits = fm_logits
        self._cache = values
        return logits, sigmoid(logits)

    def backward(self, grad_logits):
        """Fill every gradient buffer for the most recent training forward."""
        if self._cache is None:
            raise ProtocolError("model backward without a matching forward")
        values = self._cache
        self._cache = None
        grad_logits = np.asarray(grad_logits, dtype=DTYPE)
        self.zero_grads()

        grad_emb_fm = None
        if self.fm is not None:
            grad_emb_fm, wgrads = self.fm.backward(grad_logits)
            for f in self.schema:
                self._grads[f"fm.{f.name}"] += wgrads[f.field_index]

        g = grad_logits[:, None]
        for i in range(len(self.layers) - 1, -1, -1):
            g, gW, gb, ggain, gbias = self.layers[i].backward(g)
            self._grads[f"mlp{i}.W"] += gW
            self._grads[f"mlp{i}.b"] += gb
            if ggain is not None:
                self._grads[f"mlp{i}.gain"] += ggain
                self._grads[f"mlp{i}.bias"] += gbias

        grad_emb_raw, affine = fields_backward(g, self.field_plan, self.schema)
        for f, (gg, gb) in zip(self.schema, affine):
            if gg is not None:
                self._grads[f"fieldnorm.{f.name}.gain"] += gg
                self._grads[f"fieldnorm.{f.name}.bias"] += gb
        if grad_emb_fm is not None:
            grad_emb_raw = grad_emb_raw + grad_emb_fm
        for f, g_block in zip(self.schema, embedding_backward(grad_emb_raw, values, self.table, self.schema)):
            self._grads[f"emb.{f.name}"] += g_block

    # -- serialization ---------------------------------------------------------

    def config_json(self):
        payload = {
            "schema": [asdict(f) for f in self.schema],
            "model": self.config.to_dict(),
        }
        return json.dumps(payload, sort_keys=True)


def build_model(schema, config):
    return ModelGraph(schema, config)


def build_dnn(schema, k=10, mlp_widths=(400, 400, 400), numerical_norm=None, categorical_norm=None,
              mlp_norm=None, placement="before", init_seed=0, init_std=0.01):
    cfg = ModelConfig(
        kind="dnn",
        embedding_dim=k,
        mlp_widths=tuple(mlp_widths),
        numerical_norm=numerical_norm or NormSpec("none"),
        categorical_norm=categorical_norm or NormSpec("none"),
        mlp_norm=mlp_norm or NormSpec("none"),
        placement=placement,
        init_seed=init_seed,
        init_std=init_std,
    )
    return ModelGraph(schema, cfg)


def build_deepfm(schema, k=10, mlp_widths=(400, 400, 400), numerical_norm=None, categorical_norm=None,
                 mlp_norm=None, placement="before", init_seed=0, init_std=0.01):
    cfg = ModelConfig(
        kind="deepfm",
        embedding_dim=k,
        mlp_widths=tuple(mlp_widths),
        numerical_norm=numerical_norm or NormSpec("none"),
        categorical_norm=categorical_norm or NormSpec("none"),
        mlp_norm=mlp_norm or NormSpec("none"),
        placement=placement,
        init_seed=init_seed,
        init_std=init_std,
    )
    return ModelGraph(schema, cfg)


def build_norm_dnn(schema, k=10, mlp_widths=(400, 400, 400), numerical_norm_choice="vo_ln",
                   init_seed=0, init_std=0.01):
    """The combined recipe: LN or variance-only LN on numerical-field
    embeddings, BatchNorm on categorical-field embeddings, variance-only
    LN before every hidden ReLU."""
    if numerical_norm_choice not in ("vo_ln", "layernorm"):
        raise ConfigError("numerical_norm_choice must be 'vo_ln' or 'layernorm'")
    cfg = ModelConfig(
        kind="normdnn",
        embedding_dim=k,
        mlp_widths=tuple(mlp_widths),
        numerical_norm=NormSpec(numerical_norm_choice),
        categorical_norm=NormSpec("batchnorm"),
        mlp_norm=NormSpec("vo_ln"),
        placement="before",
        init_seed=init_seed,
        init_std=init_std,
    )
    return ModelGraph(schema, cfg)


def resolve_norm_dnn_config(config):
    """Fill the fixed recipe into a kind='normdnn' ModelConfig."""
    if config.kind != "normdnn":
        return config
    choice = config.numerical_norm.kind
    if choice == "none":
        choice = "vo_ln"
    if choice not in ("vo_ln", "layernorm"):
        raise ConfigError("normdnn numerical norm must be 'vo_ln' or 'layernorm'")
    return replace(
        config,
        numerical_norm=NormSpec(choice),
        categorical_norm=NormSpec("batchnorm"),
        mlp_norm=NormSpec("vo_ln"),
        placement="before",
    )


# -- checkpoint file -----------------------------------------------------------
#
# little-endian binary: magic "NRMD", u32 format version, u32 config-json
# length, the config json, its sha256 digest, u32 block count, then one
# length-prefixed (u64 byte count) raw float64 block per state array in
# graph order.

CHECKPOINT_MAGIC = b"NRMD"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path):
    cfg_json = model.config_json().encode("utf-8")
    blocks = [arr for _, arr in model.state_arrays()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_json)))
        fh.write(cfg_json)
        fh.write(hashlib.sha256(cfg_json).digest())
        fh.write(struct.pack("<I", len(blocks)))
        for arr in blocks:
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"corrupt checkpoint: truncated while reading {what}")
    return buf


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointError("corrupt checkpoint: bad magic")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        cfg_json = _read_exact(fh, cfg_len, "config")
        digest = _read_exact(fh, 32, "config hash")
        if hashlib.sha256(cfg_json).digest() != digest:
            raise CheckpointError("corrupt checkpoint: config hash mismatch")
        payload = json.loads(cfg_json.decode("utf-8"))
        schema = [FieldSchema(**f) for f in payload["schema"]]
        config = ModelConfig.from_dict(payload["model"])
        model = ModelGraph(schema, config)
        expected = model.state_arrays()
        (nblocks,) = struct.unpack("<I", _read_exact(fh, 4, "block count"))
        if nblocks != len(expected):
            raise CheckpointError(f"corrupt checkpoint: {nblocks} blocks, expected {len(expected)}")
        for name, arr in expected:
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, f"block header for {name}"))
            if nbytes != arr.nbytes:
                raise CheckpointError(f"corrupt checkpoint: block {name} has {nbytes} bytes, expected {arr.nbytes}")
            raw = _read_exact(fh, nbytes, f"block {name}")
            arr[...] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape)
        if fh.read(1):
            raise CheckpointError("corrupt checkpoint: trailing bytes")
    return model

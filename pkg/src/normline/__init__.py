"""Field-wise normalization toolkit for CTR-style models.

numpy-only building blocks: five normalization variants with hand-written
backward passes, per-field embedding tables, DNN / DeepFM / NormDNN model
stacks, an Adam + AUC training loop, activation-statistics probes, a
long-tail synthetic data generator, and an experiment CLI.
"""

from .data import Dataset, SyntheticSpec, generate_synthetic, ingest_tsv, load_schema_file, split_811
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    MetricError,
    NormlineError,
    NumericsError,
    ProtocolError,
    ShapeError,
)
from .features import (
    CATEGORICAL,
    NUMERICAL,
    EmbeddingTable,
    FieldNormPlan,
    FieldSchema,
    embed_batch,
    embed_numerical,
    embedding_backward,
    normalize_fields,
)
from .network import (
    MlpLayerSpec,
    ModelConfig,
    ModelGraph,
    build_deepfm,
    build_dnn,
    build_model,
    build_norm_dnn,
    load_checkpoint,
    save_checkpoint,
)
from .norm_layers import (
    NormSpec,
    NormState,
    batch_norm_forward,
    group_norm_forward,
    layer_norm_forward,
    norm_backward,
    norm_forward,
    simple_ln_forward,
    vo_ln_diag_derivative,
    vo_ln_forward,
)
from .numerics import make_rng, matmul, relu, row_mean_var, sigmoid
from .probe import Probe, StatsRecord, attach_probes, export_stats, load_stats, negative_fraction
from .train import TrainConfig, adam_step, auc, bce_loss, evaluate, fit

__version__ = "0.1.0"

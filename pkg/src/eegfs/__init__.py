"""Entropy-weighted feature selection with a gradient memory bank, on a
self-contained 1-D CNN pipeline for multichannel signal classification."""

from .autodiff import (
    BatchNormState,
    DimensionError,
    Tape,
    TapeUsageError,
    Tensor,
    ValidationError,
    backward,
)
from .bank import AlphaWeights, GradientBank, SampledGradients, apply_decay, compute_alpha, cosine_sim
from .data import CorpusSpec, Dataset, EegClip, ParseError, generate, read, split, write
from .encoder import ConfigError, Encoder, EncoderConfig
from .metrics import MetricsReport, UndefinedMetricError, auroc, confusion, rates, report
from .selection import (
    AttributionMap,
    ConfigurationError,
    FeatureSelector,
    FsState,
    batch_pool,
    entropy,
    export_attribution,
    fs_forward,
    heat_map,
    lambda_weights,
    probability,
)
from .training import (
    Checkpoint,
    DivergenceError,
    TrainConfig,
    TrainResult,
    adam_step,
    evaluate,
    load,
    save,
    train,
)

__version__ = "0.1.0"

"""Adaptive feature normalization for models facing nuisance-source shift.

The package trains small convolutional models whose normalization layers
can either freeze batch statistics at training time or recompute them at
evaluation time, per batch or per sample. Diagnostics measure how far
frozen statistics drift on new data, and an invariance probe checks how
much nuisance identity leaks into learned features.
"""

__version__ = "0.1.0"

from .data import (
    TaggedDataset,
    corrupt_dataset,
    corrupt_image,
    generate_synthetic_sensor,
    load_dataset,
    load_idx,
    save_dataset,
    split_by_extraneous,
    standardize_per_dim,
    window_dataset,
)
from .diagnostics import (
    FromReference,
    collect_normalized_moments,
    concentration_metric,
    emit_report,
    half_split_protocol,
)
from .errors import (
    AdanormError,
    ConfigError,
    DataError,
    FormatError,
    StateError,
    TrainingError,
)
from .invariance import (
    FeatureBank,
    build_decoder,
    extract_features,
    run_invariance,
    stratified_split,
)
from .models import (
    ImageArch,
    Mode,
    Model,
    ModelConfig,
    SensorArch,
    build_model,
    checkpoint_read,
    checkpoint_write,
)
from .normalization import (
    Averaging,
    NormSpec,
    NormState,
    Scheme,
    Statistic,
    effective_eval_spec,
    enumerate_valid_configs,
    norm_forward_eval,
    norm_forward_train,
)
from .optim import LrSchedule, TrainConfig, evaluate, train
from .repro import CriterionResult, ReproSuite
from .tensor import FeatureTensor, Tape, backward, finite_diff_grad, relative_error

__all__ = [
    "__version__",
    "AdanormError",
    "Averaging",
    "ConfigError",
    "CriterionResult",
    "DataError",
    "FeatureBank",
    "FeatureTensor",
    "FormatError",
    "FromReference",
    "ImageArch",
    "LrSchedule",
    "Mode",
    "Model",
    "ModelConfig",
    "NormSpec",
    "NormState",
    "ReproSuite",
    "Scheme",
    "SensorArch",
    "StateError",
    "Statistic",
    "TaggedDataset",
    "TrainConfig",
    "TrainingError",
    "Tape",
    "backward",
    "build_decoder",
    "build_model",
    "checkpoint_read",
    "checkpoint_write",
    "collect_normalized_moments",
    "concentration_metric",
    "corrupt_dataset",
    "corrupt_image",
    "effective_eval_spec",
    "emit_report",
    "enumerate_valid_configs",
    "evaluate",
    "extract_features",
    "finite_diff_grad",
    "generate_synthetic_sensor",
    "half_split_protocol",
    "load_dataset",
    "load_idx",
    "norm_forward_eval",
    "norm_forward_train",
    "relative_error",
    "run_invariance",
    "save_dataset",
    "split_by_extraneous",
    "standardize_per_dim",
    "stratified_split",
    "train",
    "window_dataset",
]

"""Task head for windowed multichannel classification: multi-scale causal
convolution, learnable graph mixing, and analytic-basis feature mapping,
with a full training/evaluation/ablation/interpretability pipeline."""

from .errors import (
    CompatibilityError,
    ConfigError,
    DimensionError,
    FormatError,
    MscgcError,
    NumericalError,
    UndefinedMetricError,
    UsageError,
    ValidationError,
    VerificationError,
)
from .tensor import Tensor, finite_diff_check
from .model import ModelConfig, MscgcKanModel
from .training import TrainConfig, train_loop
from .data import SynthSpec, gen_synthetic, split_dataset

__version__ = "0.1.0"

__all__ = [
    "CompatibilityError",
    "ConfigError",
    "DimensionError",
    "FormatError",
    "ModelConfig",
    "MscgcError",
    "MscgcKanModel",
    "NumericalError",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "UndefinedMetricError",
    "UsageError",
    "ValidationError",
    "VerificationError",
    "finite_diff_check",
    "gen_synthetic",
    "split_dataset",
    "train_loop",
    "__version__",
]

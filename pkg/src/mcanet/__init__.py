"""Multi-scale cross-axis attention segmentation network, built on a
self-contained numpy autograd core with training, metrics, and accounting
tooling."""

from .config import PRESETS, RunConfig, VariantSpec, build_model, load_config
from .decoder import AblationFlags, DecoderSpec, MCADecoder, MCANet
from .encoder import EncoderSpec, FeaturePyramid, MSCANEncoder
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    GenerationError,
    McanetError,
    NumericsError,
    ShapeError,
)
from .metrics import MetricsReport, confusion, hausdorff, model_stats, scores
from .tensor import Tensor, backward, grad_check, no_grad, precision
from .train import cross_entropy_loss, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "CheckpointError",
    "ConfigError",
    "DataError",
    "DecoderSpec",
    "EncoderSpec",
    "FeaturePyramid",
    "GenerationError",
    "MCADecoder",
    "MCANet",
    "McanetError",
    "MetricsReport",
    "MSCANEncoder",
    "NumericsError",
    "PRESETS",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "VariantSpec",
    "backward",
    "build_model",
    "confusion",
    "cross_entropy_loss",
    "evaluate",
    "grad_check",
    "hausdorff",
    "load_config",
    "model_stats",
    "no_grad",
    "precision",
    "scores",
    "train",
]

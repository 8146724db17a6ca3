"""Low-light event-guided video super-resolution on synthetic data."""

from .errors import ConfigMismatchError, IntegrityError, InvalidInputError, TrainingDiverged
from .model import ABLATIONS, LowLightEventVSR, ModelConfig, ablation_config, build_model

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "ConfigMismatchError",
    "IntegrityError",
    "InvalidInputError",
    "LowLightEventVSR",
    "ModelConfig",
    "TrainingDiverged",
    "ablation_config",
    "build_model",
]

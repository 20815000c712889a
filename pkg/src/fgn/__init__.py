"""Few-shot instance segmentation with support-guided proposals, detection and masks."""

from ._jit import USE_NUMBA
from .backbone import ModelParameters, init_parameters
from .config import ConfigError, ModelConfig, ProposalConfig, RunConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["USE_NUMBA", "ConfigError", "ModelConfig", "ModelParameters", "ProposalConfig", "RunConfig",
           "TrainConfig", "init_parameters"]

"""Unpaired image dehazing with adversarially generated contrastive negatives."""

from .config import TrainConfig, parse_config
from .errors import CheckpointError, ConfigError, DataError, DivergenceError
from .losses import LossWeights
from .networks import GeneratorSpec, NetworkSpec, build_networks
from .trainer import CDDTrainer, load_checkpoint, lr_schedule, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "CDDTrainer", "CheckpointError", "ConfigError", "DataError", "DivergenceError",
    "GeneratorSpec", "LossWeights", "NetworkSpec", "TrainConfig", "build_networks",
    "load_checkpoint", "lr_schedule", "parse_config", "save_checkpoint", "train",
]

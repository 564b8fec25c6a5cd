"""Patch-transformer anomaly detection and localization in plain numpy."""

from .config import ModelConfig, TrainConfig, desk_scale, full_scale, tiny
from .trainer import Checkpoint, Network, Trainer, load_checkpoint, save_checkpoint, train

__all__ = [
    "ModelConfig", "TrainConfig", "desk_scale", "full_scale", "tiny",
    "Checkpoint", "Network", "Trainer", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"

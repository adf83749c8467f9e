"""Adapter-tuned ViT segmentation for speckled single-channel imagery."""

from .config import ModelConfig, TrainConfig, load_config, preset
from .model import build_model, count_parameters, predict

__all__ = ["ModelConfig", "TrainConfig", "load_config", "preset", "build_model", "count_parameters", "predict"]
__version__ = "0.1.0"

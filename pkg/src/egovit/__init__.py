"""Dynamic class tokens and pyramid phase merging for video transformers, in numpy."""

from .config import EgoViTConfig, TrainConfig, load_run_config, tiny_config
from .model import EgoViTParams, ForwardTrace, forward, init_params, param_count

__version__ = "0.1.0"

__all__ = [
    "EgoViTConfig", "TrainConfig", "load_run_config", "tiny_config",
    "EgoViTParams", "ForwardTrace", "forward", "init_params", "param_count",
]

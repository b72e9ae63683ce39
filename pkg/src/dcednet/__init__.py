"""Multi-level encoder-decoder segmentation of red blood cells, in numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, load_config, parse_config
from .network import MultiLevelNet, build_net, compute_gate, multi_level_forward
from .train import TrainConfig, run_kfold, train_network

__version__ = "0.1.0"

__all__ = [
    "Config", "MultiLevelNet", "TrainConfig", "build_net", "compute_gate", "load_checkpoint",
    "load_config", "multi_level_forward", "parse_config", "run_kfold", "save_checkpoint",
    "train_network",
]

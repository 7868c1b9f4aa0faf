"""Instruction-following quadcopter simulation and training."""

from .config import Config, load_config, save_config

__all__ = ["Config", "load_config", "save_config"]
__version__ = "0.1.0"

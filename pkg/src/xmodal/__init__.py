"""Crossmodal knowledge distillation with relaxed class-name text."""
from .config import TrainConfig, load_config
from .errors import XModalError

__version__ = "0.1.0"
__all__ = ["TrainConfig", "XModalError", "__version__", "load_config"]

"""Tabular in-context learning with multi-scale sparse row attention and latent memory."""

from .config import ModelConfig, preset
from .model import TabularICLModel, collate
from .tasks import TabularTask

__all__ = ["ModelConfig", "TabularICLModel", "TabularTask", "collate", "preset"]
__version__ = "0.1.0"

"""Laparoscopic instrument detection and identification with random forests."""

from .core import BoundingBox, Dataset, Frame, ToolClass
from .modelfile import PipelineModel, load_model, save_model

__version__ = "0.1.0"

__all__ = ["BoundingBox", "Dataset", "Frame", "PipelineModel", "ToolClass",
           "load_model", "save_model", "__version__"]

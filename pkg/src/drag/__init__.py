"""Region-graph privacy detector on a pure-numpy autodiff engine."""

from .backbone import BackboneConfig
from .data import Dataset, DatasetConfig, generate_dataset, load_dataset
from .model import DRAG, MODES, ModelConfig
from .training import MetricsReport, default_schedule, evaluate, run_schedule

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DRAG",
    "Dataset",
    "DatasetConfig",
    "MODES",
    "MetricsReport",
    "ModelConfig",
    "default_schedule",
    "evaluate",
    "generate_dataset",
    "load_dataset",
    "run_schedule",
]

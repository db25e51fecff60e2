"""Unpaired image-to-image translation for ultrasonic C-scan datasets.

Reads and writes the dataset binary format of the companion toolkit and
verifies loss parity against its golden vectors.
"""

from .data import DatasetFormatError, ImageRecord, ImageSet, load_image_set, save_image_set
from .engine import activation_map_loss, loss_parity_check, train, translate
from .models import GanTrainConfig, build_models, parameter_count

__all__ = [
    "DatasetFormatError",
    "GanTrainConfig",
    "ImageRecord",
    "ImageSet",
    "activation_map_loss",
    "build_models",
    "load_image_set",
    "loss_parity_check",
    "parameter_count",
    "save_image_set",
    "train",
    "translate",
]

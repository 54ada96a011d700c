from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, Dataset, load_dataset, write_idx_images
from .grad import LossSpec, input_gradient
from .models import ARCHITECTURES, Classifier, build_model, parameter_vector, zero_parameters
from .numeric import cross_entropy, log_softmax, soft_cross_entropy, softmax
from .rng import Rng

__all__ = [
    "ARCHITECTURES",
    "CheckpointError",
    "Classifier",
    "DataFormatError",
    "Dataset",
    "LossSpec",
    "Rng",
    "build_model",
    "cross_entropy",
    "input_gradient",
    "load_checkpoint",
    "load_dataset",
    "log_softmax",
    "parameter_vector",
    "save_checkpoint",
    "soft_cross_entropy",
    "softmax",
    "write_idx_images",
    "zero_parameters",
]

"""LiteVAE: a wavelet-based variational autoencoder on a small numpy autodiff engine."""

from .losses import LossWeights
from .model import LiteVAE, ModelConfig
from .tensor import Tensor, backward, grad, no_grad, precision
from .train import TrainConfig, train

__all__ = [
    "LiteVAE",
    "LossWeights",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "grad",
    "no_grad",
    "precision",
    "train",
]
__version__ = "0.1.0"

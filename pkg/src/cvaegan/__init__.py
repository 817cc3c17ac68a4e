"""Two-stage text-to-image generation: a conditional VAE sketches low-resolution
images from text embeddings and a conditional GAN refines them to 4x size.

Everything runs on numpy with a small reverse-mode autodiff tape.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    CvaeGanError,
    DegenerateBatchError,
    DimensionError,
    FormatError,
    InsufficientDataError,
    NonFiniteLossError,
)
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

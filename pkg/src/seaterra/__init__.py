"""Unsupervised image-stream topic discovery with convolutional autoencoder features."""

from seaterra.errors import (
    ConfigError,
    DataError,
    DivergedTrainingError,
    NumericalError,
    SeaterraError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DivergedTrainingError",
    "NumericalError",
    "SeaterraError",
    "__version__",
]

"""Recursive attention-gated convolutional recurrent speech enhancement on a
small numpy autodiff engine."""

from .errors import ConfigError, ContractError, DarcnError, DataError, DimensionError, NumericalError
from .model import PAPER, PRESETS, TINY, ArchConfig, DarcnModel, preset
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "ConfigError", "ContractError", "DarcnError", "DarcnModel", "DataError", "DimensionError",
    "NumericalError", "PAPER", "PRESETS", "TINY", "Tensor", "no_grad", "preset",
]

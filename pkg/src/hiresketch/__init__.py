"""Hierarchical residual network with compact triplet-center loss, on a
small numpy autodiff core."""

from .errors import ContractError, DimensionError, LoadError, TrainingError
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["ContractError", "DimensionError", "LoadError", "TrainingError", "Tensor", "no_grad"]

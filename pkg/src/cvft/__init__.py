"""Cross-view feature transport: Sinkhorn transport layer, triplet training, retrieval."""

from .data_io import CHECKPOINT_VERSION, MANIFEST_VERSION, TENSOR_VERSION
from .errors import CVFTError, NumericError, ValidationError

__version__ = "0.1.0"

__all__ = ["__version__", "CVFTError", "NumericError", "ValidationError", "TENSOR_VERSION",
           "CHECKPOINT_VERSION", "MANIFEST_VERSION"]

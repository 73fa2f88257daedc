"""normbench: batch vs layer normalization, training-inference discrepancy and regularized BN at desk scale."""
from ._core import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]

"""Gain-loss Bose-Hubbard dimer: exact quantum dynamics, a second-order moment
hierarchy, the U=0 closed-form solution, and the Gross-Pitaevskii limit."""

from .core import (DensityMatrix, FockBasis, FockVector, ParameterError, SystemParams,
                   TruncationError, TruncationWarning, make_params, product_state)

__version__ = "0.1.0"

__all__ = ["DensityMatrix", "FockBasis", "FockVector", "ParameterError", "SystemParams",
           "TruncationError", "TruncationWarning", "make_params", "product_state"]

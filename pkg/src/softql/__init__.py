"""Soft Q-learning with energy-based policies and amortized SVGD samplers."""

from .errors import ContractViolation, InvalidInputError, NumericAbort

__version__ = "0.1.0"

__all__ = ["ContractViolation", "InvalidInputError", "NumericAbort", "__version__"]

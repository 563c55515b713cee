"""Desk-scale neural diffusion models: learnable forward transforms on top of VP diffusion."""

from .errors import (
    ContractError, DomainError, InversionError, NDMError, NonFiniteError, NumericalError, SingularityError,
    StiffIntegrationError,
)
from .model import NDM
from .nets import NetSpec
from .schedule import Schedule
from .transform import DiagonalTransform, IdentityTransform, LearnableTransform

__version__ = "0.1.0"

__all__ = [
    "NDM", "NetSpec", "Schedule", "IdentityTransform", "DiagonalTransform", "LearnableTransform",
    "NDMError", "ContractError", "DomainError", "NumericalError", "NonFiniteError", "SingularityError",
    "InversionError", "StiffIntegrationError",
]

"""Ensembles of small Wasserstein GANs tied to prototypes through semi-discrete optimal transport."""

from kgans.errors import (
    ContractError,
    EvaluationError,
    ParseError,
    PoisonedStateError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "EvaluationError",
    "ParseError",
    "PoisonedStateError",
    "ShapeError",
    "__version__",
]

"""Exception types shared across the package."""


class ContractError(ValueError):
    """An input violates the documented preconditions of an operation."""


class ShapeError(ContractError):
    """Array dimensions do not line up."""


class EvaluationError(ArithmeticError):
    """A numeric evaluation produced a non-finite value."""


class ParseError(ContractError):
    """A file could not be parsed; carries the offending line number when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PoisonedStateError(FloatingPointError):
    """An optimizer received NaN/inf gradients; its state can no longer be trusted."""

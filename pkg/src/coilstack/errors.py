"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not agree."""


class ContractViolation(ValueError):
    """A precondition of an operation was not met."""


class DegenerateFeatureError(ContractViolation):
    """A feature column has zero spread and cannot be standardized."""


class TrainingDegeneracyError(ValueError):
    """Training data holds a single class."""


class ParseError(ValueError):
    """A data file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ValueError):
    """A record violates a data invariant."""

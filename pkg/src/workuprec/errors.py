"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class UsageError(ValueError):
    """An operation was called with invalid arguments or out of order."""


class TrainingError(RuntimeError):
    """Training produced unusable state, e.g. non-finite parameters."""


class EvaluationError(RuntimeError):
    """A metric could not be computed under its stated contract."""


class FormatError(ValueError):
    """A serialized file does not conform to its schema."""

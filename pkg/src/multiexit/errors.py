"""Exception and warning types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class InvalidPlacementError(InvalidInputError):
    """Raised for exit anchors that do not exist in the backbone."""


class DegenerateNetworkError(InvalidInputError):
    """Raised when a subgraph owns no parameters."""


class NumericalError(ArithmeticError):
    """Raised on non-finite losses or gradients."""


class TraceFormatError(ValueError):
    """Raised when a JSON-lines file does not follow its schema."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointFormatError(ValueError):
    """Raised for unreadable or foreign checkpoint files."""


class CalibrationSkipped(UserWarning):
    """Temperature fitting was skipped; T=1 is used instead."""


class ThresholdWarning(UserWarning):
    """A threshold computation fell back to a guarded value."""

"""Exception types shared across the package.

The CLI maps each family to a distinct exit code, so new errors should
subclass one of these rather than raising bare built-ins.
"""


class ValidationError(ValueError):
    """Inputs violate a documented precondition (shapes, ranges, emptiness)."""


class DimensionError(ValidationError):
    pass


class StaleArtifactError(ValidationError):
    """An artifact no longer matches the fingerprint it was produced against."""


class FormatError(OSError):
    """A binary or CSV file does not follow its declared layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where only finite values are allowed."""

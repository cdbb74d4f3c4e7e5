"""Exception classes raised throughout the package.

Argument-related errors derive from ValueError so callers can catch them the
same way as any other invalid argument. File system problems surface as the
builtin OSError.
"""


class ShapeMismatch(ValueError):
    """Grid shapes are inconsistent with each other or with a layout."""


class NonFiniteValues(ValueError):
    """A grid contains NaN or infinite values."""


class NonBinaryMask(ValueError):
    """A region mask holds values other than 0.0 and 1.0."""


class InvalidConfig(ValueError):
    """A parameter violates the precondition of an operation."""


class ValidationError(InvalidConfig):
    """A run configuration key is unknown or holds an invalid value."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class IndexOutOfRange(IndexError):
    """A diffusion timestep index lies outside the schedule."""


class StaleTape(RuntimeError):
    """A backward pass does not match the forward pass that recorded the tape."""


class InsufficientSamples(ValueError):
    """Too few feature vectors to estimate a distribution statistic."""


class TooSmall(ValueError):
    """An image is smaller than the metric's window."""


class FormatError(ValueError):
    """A binary or JSON file does not follow its expected format."""


class CrcMismatch(FormatError):
    """A checkpoint payload does not match its stored checksum."""

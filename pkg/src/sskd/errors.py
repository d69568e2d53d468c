"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""

    @classmethod
    def mismatch(cls, what, a, b):
        return cls(f"{what}: shapes {tuple(a)} vs {tuple(b)} are incompatible")


class ConfigError(ValueError):
    """A configuration is internally inconsistent or unsupported."""


class TapeError(RuntimeError):
    """A computation tape was used outside its lifecycle contract."""


class UsageError(RuntimeError):
    """An API was called with arguments outside its contract."""


class ValidationError(ValueError):
    """Input data failed validation (labels, ranges, file contents)."""


class ParseError(ValueError):
    """A binary or text artifact could not be parsed.

    ``offset`` locates the failure in the input (byte offset for binary
    formats, line number for text formats).
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class RunAbort(RuntimeError):
    """A training run hit a non-recoverable numeric failure."""

"""Exception hierarchy shared across the package."""


class LatentNerfError(Exception):
    """Base class for all package errors."""


class DimensionError(LatentNerfError, ValueError):
    """Array shapes or image sizes are incompatible with an operation."""


class AlignmentError(DimensionError):
    """A patch is not aligned to the 8-pixel latent grid."""


class UsageError(LatentNerfError, RuntimeError):
    """An API was called in a state that does not allow it."""


class ContractViolation(LatentNerfError, ValueError):
    """An input violates a documented precondition (e.g. negative density)."""


class NumericError(LatentNerfError, FloatingPointError):
    """A non-finite value appeared in parameters or losses."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries a diagnostic snapshot path."""

    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


class FormatError(LatentNerfError, ValueError):
    """A file does not follow its binary or text format."""


class ChecksumError(FormatError):
    """A container's checksum does not match its payload."""


class LoadError(LatentNerfError, ValueError):
    """A dataset manifest references missing or malformed content."""

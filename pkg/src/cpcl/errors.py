"""Exception hierarchy shared by every module."""


class CPCLError(Exception):
    """Base class for all package errors."""


class ShapeError(CPCLError, ValueError):
    pass


class ValidationError(CPCLError, ValueError):
    pass


class UsageError(CPCLError, RuntimeError):
    pass


class ConfigError(CPCLError, ValueError):
    pass


class DataError(CPCLError):
    """Missing or unreadable input data."""


class NumericalError(CPCLError, FloatingPointError):
    """A loss or tensor became non-finite during training."""


class FormatError(CPCLError, ValueError):
    """Base for binary file-format problems (checkpoints, volumes)."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    def __init__(self, path, expected, actual):
        super().__init__(
            f"{path}: truncated payload, expected {expected} bytes but found {actual}"
        )
        self.path = path
        self.expected = expected
        self.actual = actual


class HeaderShapeError(FormatError):
    pass

"""Exception taxonomy shared by every module.

The CLI maps these onto process exit codes: usage problems exit 1,
data/format problems exit 2, numeric failures exit 3.
"""


class SbmoeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SbmoeError):
    """Operands have incompatible dimensions."""


class NumericError(SbmoeError):
    """A numeric contract was violated (non-finite values, zero norms, ...)."""


class DegenerateVarianceError(NumericError):
    """Paired differences have zero variance; the t statistic is undefined."""


class FormatError(SbmoeError):
    """A binary file does not match its declared format."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(SbmoeError):
    """A text file has a malformed record."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DataError(SbmoeError):
    """Inputs are structurally valid but inconsistent (unknown ids, ...)."""


class ConfigError(SbmoeError):
    """A configuration value is out of its valid range."""

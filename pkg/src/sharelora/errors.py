"""Exception types shared across the package.

The CLI maps these to exit codes: validation problems exit with 1,
numerical failures with 2 and file problems with 3.
"""


class ShareLoraError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ShareLoraError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(InvalidInputError):
    """Configuration validation failure; ``path`` names the offending field."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class TooLargeError(ShareLoraError):
    """An enumeration would exceed its configured cap."""


class UnsupportedConfigurationError(ShareLoraError):
    """The requested combination of options has no valid implementation."""


class DegenerateError(ShareLoraError, ValueError):
    """A quantity the computation divides by is zero."""


class NumericalFailureError(ShareLoraError, ArithmeticError):
    """Training or planning produced a non-finite value."""


class ParseError(ShareLoraError):
    """A file could not be parsed; the message carries line/field context."""


class UnsupportedVersionError(ParseError):
    """A file declares a format version this build does not read."""

"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, verification failures exit 3.
"""


class MomentGridError(Exception):
    """Base class for all package-specific errors."""


class ParseError(MomentGridError):
    """A text record could not be parsed; message names the offending line."""


class FormatError(MomentGridError):
    """A binary or structured file does not match its declared format."""


class ValidationError(MomentGridError):
    """Values parse but violate a documented invariant."""


class ConfigError(MomentGridError):
    """Unknown or malformed configuration key/value."""

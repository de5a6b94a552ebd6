"""Exception types shared across the package."""


class AvuError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AvuError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(AvuError):
    """A caller violated an operation's precondition."""


class NumericsError(AvuError):
    """A computation produced non-finite values."""


class ValidationError(AvuError):
    """A data object violates its invariants."""


class FormatError(AvuError):
    """A byte stream does not conform to the expected file format."""


class ParseError(AvuError):
    """A token sequence violates its task grammar."""

    def __init__(self, message, position=None, expected=None):
        super().__init__(message)
        self.position = position
        self.expected = expected


class ConfigError(AvuError):
    """A configuration value is invalid or inconsistent."""

"""Exception types shared across the package."""


class WvaeError(Exception):
    """Base class for all package errors."""


class ShapeError(WvaeError):
    """Operands have incompatible or invalid shapes."""


class NumericsError(WvaeError, ArithmeticError):
    """An operation produced non-finite values or left its domain."""


class TapeError(WvaeError):
    """Backward pass requested on a consumed or detached graph."""


class FormatError(WvaeError):
    """A file does not conform to the expected on-disk format."""


class ConfigError(WvaeError):
    """A run configuration failed validation."""

"""Exception taxonomy shared across the package.

Every module raises one of these instead of bare ValueError/RuntimeError so
callers (and the CLI exit-code mapping) can tell failure classes apart.
"""


class DualStreamError(Exception):
    """Base class for all package errors."""


class DimensionError(DualStreamError, ValueError):
    """Operand shapes incompatible beyond the allowed broadcast rules."""


class ContractError(DualStreamError, ValueError):
    """A documented precondition was violated by the caller."""


class StateError(DualStreamError, RuntimeError):
    """Operation attempted on an object in the wrong lifecycle state."""


class NumericError(DualStreamError, ArithmeticError):
    """Non-finite values appeared where finite values are required."""


class ParseError(DualStreamError, ValueError):
    """Malformed text input (manifest lines, config files)."""


class ValidationError(DualStreamError, ValueError):
    """Well-formed input whose values are out of the allowed range."""


class DecodeError(DualStreamError, ValueError):
    """Image bytes that cannot be decoded."""


class FormatError(DualStreamError, ValueError):
    """Binary container with a bad magic number or unsupported version."""


class CorruptionError(DualStreamError, ValueError):
    """Binary container that is truncated or internally inconsistent."""


class ConfigError(DualStreamError, ValueError):
    """Configuration is inconsistent with the requested operation."""


class CompatibilityError(DualStreamError, ValueError):
    """Stored artifact does not match the runtime configuration."""


class DegenerateVarianceError(DualStreamError, ValueError):
    """A correlation was requested on a (near-)constant sequence."""

"""Exception hierarchy shared across the toolkit.

The CLI maps :class:`InputError` (and subclasses) to exit code 1 and
everything else to exit code 2.
"""


class FocusError(Exception):
    """Base class for all toolkit errors."""


class InputError(FocusError, ValueError):
    """Bad user-supplied data: wrong labels, unknown tap, channel mismatch."""


class ShapeError(InputError):
    """Tensor extents are inconsistent with the operation."""


class ConfigError(InputError):
    """Invalid configuration value."""


class IngestionError(InputError):
    """A manifest entry or referenced file could not be read."""


class FormatError(InputError):
    """A binary container or text file does not match its declared format."""


class NumericError(FocusError, ArithmeticError):
    """Non-finite values or an ill-conditioned system."""


class StateError(FocusError, RuntimeError):
    """An object was used before it was ready (e.g. untrained batch-norm)."""

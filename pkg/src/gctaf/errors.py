"""Exception hierarchy shared by every gctaf module.

The CLI maps each family onto its own exit code, so raise the most specific
class that applies.
"""


class GctafError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GctafError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(GctafError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(GctafError, ValueError):
    """A caller violated an operation's precondition."""


class NonFiniteError(GctafError, FloatingPointError):
    """A NaN or Inf appeared while anomaly detection was enabled."""


class NumericAbort(GctafError):
    """Training stopped because the loss became non-finite."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class FormatError(GctafError):
    """A binary checkpoint is corrupt or unreadable."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ParseError(GctafError):
    """A text input (CSV cell, manifest line) could not be parsed."""

    def __init__(self, message, path=None, line=None, column=None):
        loc = ":".join(str(p) for p in (path, line, column) if p is not None)
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line
        self.column = column


class ValidationError(GctafError):
    """Loaded data does not match the declared dataset shape or labels."""


class ImputationError(GctafError):
    """Missing values could not be filled."""


class LeakageError(GctafError):
    """Training data overlaps in time with the data it is evaluated on."""

"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1,
configuration/validation errors exit 2, numerical failures exit 3 and
I/O or format problems exit 4.
"""


class PairglowError(Exception):
    """Base class for all package errors."""


class UsageError(PairglowError):
    """An API or CLI call that is malformed regardless of configuration."""


class ConfigError(PairglowError):
    """Inconsistent shapes, invalid option values, or bad configuration."""


class NumericalError(PairglowError):
    """NaN/Inf encountered, or a numerical contract violated."""

    def __init__(self, message, *, operation=None, iteration=None, last_loss=None):
        super().__init__(message)
        self.operation = operation
        self.iteration = iteration
        self.last_loss = last_loss


class FormatError(PairglowError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset

"""Exception hierarchy shared by the library and the command line."""


class XaiError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(XaiError, ValueError):
    """Malformed input data, configuration or bundle."""

    exit_code = 2


class ConfigError(ValidationError):
    """Inconsistent or unknown configuration."""


class NumericError(XaiError, ArithmeticError):
    """Non-finite values or failed factorizations.

    ``layer`` and ``epoch``/``batch`` are attached when known so the caller
    can locate where the computation broke down.
    """

    exit_code = 3

    def __init__(self, message, layer=None, epoch=None, batch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch
        self.batch = batch

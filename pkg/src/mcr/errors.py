"""Exception hierarchy shared by every module."""


class MCRError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(MCRError, ValueError):
    """Array shapes are incompatible with the requested operation."""


class ParameterError(MCRError, ValueError):
    """A scalar parameter lies outside its admissible range."""


class CalibrationError(MCRError, RuntimeError):
    """Mask generation could not reach the requested acceleration."""

    def __init__(self, message, best_R=None):
        super().__init__(message)
        self.best_R = best_R


class IngestionError(MCRError, IOError):
    """A volume file on disk is malformed."""


class DegenerateInputError(MCRError, ValueError):
    """Input data carries no usable dynamic range."""


class PairingError(MCRError, ValueError):
    """Volumes, slices or records that must match do not."""


class ConfigurationError(MCRError, ValueError):
    """A configuration is inconsistent (roles, variants, checkpoints)."""


class NumericalError(MCRError, FloatingPointError):
    """A computation produced non-finite values."""


class DomainError(MCRError, ValueError):
    """Image values lie outside the range a metric is defined on."""

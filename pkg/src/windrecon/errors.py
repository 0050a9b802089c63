"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class WindreconError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(WindreconError):
    """Invalid configuration, argument, or precondition violation."""


class DataError(WindreconError):
    """Malformed, inconsistent, or non-finite input data."""


class NumericalError(WindreconError):
    """A numerical procedure failed (singular system, divergence, ...)."""


class MetricError(NumericalError):
    """A metric is undefined for the given inputs (e.g. empty MG filter set)."""


class TrainingDiverged(NumericalError):
    """Training produced a non-finite loss."""

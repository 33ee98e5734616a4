"""Exception hierarchy shared across the pipeline.

Each branch maps to a CLI exit code: configuration problems exit 2, bad or
missing data exits 3, numerical failures exit 4.
"""


class EphemVoError(Exception):
    exit_code = 1


class ConfigError(EphemVoError):
    """Invalid configuration value, detected before any work starts."""

    exit_code = 2


class DataError(EphemVoError):
    """Missing, malformed, or inconsistent input data."""

    exit_code = 3


class NumericalError(EphemVoError):
    """A solver or numeric routine failed to produce a usable result."""

    exit_code = 4


class InsufficientFeaturesError(NumericalError):
    """Too few gated feature tracks to constrain a 6-dof pose."""


class DivergenceError(NumericalError):
    """Damped iterations kept increasing the cost."""


class InsufficientOverlapError(NumericalError):
    """Too few reference pixels warp into the current image."""

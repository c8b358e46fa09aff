"""Exception types shared across the package.

The CLI maps these onto process exit codes, so anything user-facing should
raise one of them rather than a bare Exception.
"""


class GrooveGanError(Exception):
    """Base class for package errors."""


class ConfigError(GrooveGanError):
    """Invalid configuration: unknown keys, bad values, inconsistent settings."""


class DataError(GrooveGanError):
    """Invalid input data: bad files, schema violations, malformed audio."""


class NumericsError(GrooveGanError):
    """Numerical failure at runtime (NaN/Inf losses, corrupt checkpoints)."""

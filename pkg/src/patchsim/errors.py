"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


class DataError(ValueError):
    """Malformed scenario/rollout file or violated data invariant."""


class NumericalError(RuntimeError):
    """Non-finite value where the pipeline requires finite numbers."""

"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, TrainingError and
DataError -> 2, PartialGridError -> 3.
"""


class WrelError(Exception):
    """Base class for all package errors."""


class ConfigError(WrelError):
    """Invalid configuration, unknown keys, or bad command usage."""


class DataError(WrelError):
    """Unreadable or malformed dataset artifacts."""


class GenerationError(WrelError):
    """Synthetic scene generation could not satisfy its constraints."""

    def __init__(self, message: str, seed: int | None = None, index: int | None = None):
        if seed is not None:
            message = f"{message} (seed={seed}, sample_index={index})"
        super().__init__(message)
        self.seed = seed
        self.index = index


class TrainingError(WrelError):
    """Training diverged or hit an unrecoverable runtime failure."""


class PartialGridError(WrelError):
    """A sweep finished with missing grid cells."""

"""Exception types shared across the package."""


class DDGError(Exception):
    """Base class for all package errors."""


class ConfigError(DDGError, ValueError):
    """Invalid hyperparameters, plans, or run configuration."""


class ValidationError(DDGError, ValueError):
    """Input arrays violate an operation's preconditions."""


class IngestionError(DDGError, OSError):
    """A dataset file is missing or malformed."""


class NaNLossError(DDGError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})

"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: malformed JSON, unknown fields, bad parameter values."""


class DataError(ValueError):
    """Invalid data: unparseable rows, outcomes outside the likelihood's space."""


class NotFittedError(RuntimeError):
    """Operation requires a fitted model."""

"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid experiment or training configuration."""


class FormatError(ValueError):
    """A binary dataset or checkpoint file failed to parse."""


class NumericsError(RuntimeError):
    """A computation produced non-finite values."""

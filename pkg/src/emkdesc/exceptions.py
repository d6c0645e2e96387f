"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file or label table does not match its expected layout."""


class ConfigurationError(ValueError):
    """Model, grid or architecture settings are mutually inconsistent."""


class NormalizationError(ArithmeticError):
    """An all-zero descriptor cannot be l2-normalized."""

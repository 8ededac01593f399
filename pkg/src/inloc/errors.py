"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or unknown configuration (maps to CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A training/analysis quantity became non-finite (CLI exit code 4)."""

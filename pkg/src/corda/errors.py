"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or parameter combination."""


class FormatError(ValueError):
    """On-disk data does not match the expected layout."""


class ContractError(ValueError):
    """A function was called with arguments that break its preconditions."""

"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration values or incompatible shapes."""


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class FormatError(ValueError):
    """A binary or text file does not follow the expected layout."""


class VersionMismatchError(ValueError):
    """Updates from different model versions were mixed in one aggregation."""

"""Exception types shared across the package."""


class StbsError(Exception):
    """Base class for all package errors."""


class DomainError(StbsError, ValueError):
    """A numeric argument is outside the mathematical domain of an operation."""


class ConfigError(StbsError, ValueError):
    """An invalid configuration or hyperparameter value."""


class CorpusError(StbsError, ValueError):
    """Malformed corpus input or a filtering step that empties the corpus."""


class FormulaError(StbsError, ValueError):
    """A regression formula that cannot be parsed or references unknown columns."""


class NumericalError(StbsError, RuntimeError):
    """A non-finite value appeared during optimization."""


class SchemaError(StbsError, ValueError):
    """A serialized file does not match the expected versioned schema."""

"""Exception hierarchy.

Every error raised on purpose by the package derives from ``FusenetError``.
The CLI maps the three broad categories (validation, ingestion, training)
onto distinct exit codes.
"""


class FusenetError(Exception):
    exit_code = 1


class ValidationError(FusenetError):
    exit_code = 2


class ShapeError(ValidationError, ValueError):
    pass


class ContractError(ValidationError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValidationError):
    pass


class UnsupportedConfigurationError(ConfigError):
    pass


class EvaluationError(ValidationError, ValueError):
    pass


class DegenerateComparisonError(ValidationError, ValueError):
    pass


class IngestionError(FusenetError):
    exit_code = 3


class ParseError(IngestionError):
    pass


class TrainingDivergence(FusenetError):
    exit_code = 4

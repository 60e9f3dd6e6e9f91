"""Exception hierarchy shared across the package."""


class FMAEError(Exception):
    """Base class for all package errors."""


class SchemaError(FMAEError, ValueError):
    pass


class DegenerateInputError(FMAEError, ValueError):
    pass


class ContractError(FMAEError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(FMAEError, ValueError):
    pass


class ConsistencyError(FMAEError, RuntimeError):
    """Internal bookkeeping went wrong (e.g. a hole in the decoder grid)."""


class TrainingDivergenceError(FMAEError, FloatingPointError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class OracleError(FMAEError, FloatingPointError):
    pass


class MetricError(FMAEError, ValueError):
    pass


class ParseError(FMAEError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class IngestionError(FMAEError, ValueError):
    pass


class ConfigError(FMAEError, ValueError):
    pass


class CheckpointError(FMAEError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass

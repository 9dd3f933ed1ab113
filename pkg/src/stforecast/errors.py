"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ForecastError(Exception):
    exit_code = 2


class UsageError(ForecastError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(ForecastError):
    """Malformed, inconsistent or insufficient input data."""

    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class ReferentialError(DataError):
    pass


class EmptyGraphError(DataError):
    pass


class DegenerateError(DataError):
    """Zero variance, zero spread, or another input that makes a formula undefined."""


class InsufficientDataError(DataError):
    pass


class PartitionError(DataError):
    pass


class DimensionError(ValueError, ForecastError):
    exit_code = 2


class DegenerateMaskError(DimensionError):
    pass


class NumericError(ArithmeticError, ForecastError):
    exit_code = 3

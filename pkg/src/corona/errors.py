"""Exception hierarchy. Each family maps onto one CLI exit code."""


class CoronaError(Exception):
    exit_code = 1


class ValidationError(CoronaError, ValueError):
    exit_code = 2


class IngestionError(ValidationError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class AlignmentError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class SamplingError(ValidationError):
    pass


class DivergenceError(CoronaError, ArithmeticError):
    exit_code = 2


class UnknownIdError(CoronaError, KeyError):
    exit_code = 2

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown id"


class BackendError(CoronaError):
    """Transport, status or payload failure from an LLM backend."""

    exit_code = 3

    def __init__(self, message, retryable=True):
        super().__init__(message)
        self.retryable = retryable


class MissingArtifactError(CoronaError, FileNotFoundError):
    exit_code = 4

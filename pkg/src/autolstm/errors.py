"""Exception hierarchy shared across the package."""


class AutoLstmError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AutoLstmError, ValueError):
    pass


class DomainError(AutoLstmError, ValueError):
    """An operation was called outside its precondition."""


class DataError(AutoLstmError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConvergenceError(AutoLstmError, RuntimeError):
    def __init__(self, message, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual!r}, iterations={iterations})")


class TrainingError(AutoLstmError, RuntimeError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)


class ProtocolError(AutoLstmError, ValueError):
    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{message} [field: {field}]"
        super().__init__(message)


class SearchError(AutoLstmError, RuntimeError):
    """A trainer failed during a search; ``trace`` holds the steps taken so far."""

    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)

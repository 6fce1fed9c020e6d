"""Exception hierarchy; each class maps to one CLI exit code."""


class SpanCycleError(Exception):
    exit_code = 1


class DataError(SpanCycleError, ValueError):
    """Malformed dataset record, schema, or span."""

    exit_code = 3

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(SpanCycleError, ValueError):
    exit_code = 3


class DivergenceError(SpanCycleError, FloatingPointError):
    """Non-finite loss or gradient during training."""

    exit_code = 4

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class CheckpointError(SpanCycleError):
    exit_code = 5

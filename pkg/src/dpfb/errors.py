"""Exception types shared across the package."""


class DpfbError(Exception):
    pass


class ParameterError(DpfbError, ValueError):
    """Invalid argument value."""


class NumericError(DpfbError, ArithmeticError):
    """A computation produced a non-finite value."""


class CalibrationError(DpfbError):
    """The requested epsilon cannot be reached inside the sigma bracket."""


class UndefinedMetricError(DpfbError, ValueError):
    """Metric is undefined for the given data, e.g. a single-class label."""


class StatisticsError(DpfbError):
    pass


class TrainingError(DpfbError):
    """Training diverged; carries the trace up to the failure."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class SchemaError(DpfbError, ValueError):
    """Malformed input file."""

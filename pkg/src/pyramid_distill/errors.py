"""Exception hierarchy shared by every module of the package."""


class PyramidDistillError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PyramidDistillError, ValueError):
    pass


class LoadError(PyramidDistillError):
    """A weights archive or checkpoint could not be loaded."""


class DimensionError(PyramidDistillError, ValueError):
    pass


class NumericError(PyramidDistillError, ArithmeticError):
    pass


class UsageError(PyramidDistillError, ValueError):
    pass


class TrainingError(PyramidDistillError, RuntimeError):
    """Training diverged or could not complete."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class PretrainingError(TrainingError):
    pass


class MetricUndefinedError(PyramidDistillError, ValueError):
    """A metric cannot be computed, e.g. only one class is present."""


class DatasetError(PyramidDistillError):
    pass


class LayoutError(DatasetError):
    pass

"""Exception hierarchy shared by every module."""


class DflowSurError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DflowSurError, ValueError):
    """Invalid hyper-parameter, layer size or run configuration."""


class ShapeError(DflowSurError, ValueError):
    """Array dimensions do not match what the operation expects."""


class DomainError(DflowSurError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NumericError(DflowSurError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(DflowSurError, RuntimeError):
    """Training diverged or failed to reach the required accuracy."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class GenerationError(DflowSurError, RuntimeError):
    """Synthetic data generation could not produce enough valid samples."""


class CheckpointError(DflowSurError, IOError):
    """A checkpoint or data file could not be parsed."""


class CheckpointVersionError(CheckpointError):
    """The file was written with an unsupported schema version."""


class DimensionError(CheckpointError, ShapeError):
    """A loaded model does not match the dimension of the experiment."""

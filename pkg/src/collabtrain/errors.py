"""Exception types shared across the package."""


class CollabError(Exception):
    """Base class for all package errors."""


class ShapeError(CollabError, ValueError):
    """Operands with incompatible shapes; message names the op and operands."""


class ConfigError(CollabError, ValueError):
    """Invalid configuration value (factor, head count, split marker, ...)."""


class GraphError(CollabError, RuntimeError):
    """Misuse of the computation graph (non-scalar backward root, ...)."""


class NumericError(CollabError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DataError(CollabError, ValueError):
    """Malformed dataset file (bad IDX magic, ragged CSV, ...)."""


class TrainingDiverged(CollabError, RuntimeError):
    """Training produced a non-finite loss; the run is aborted."""

    def __init__(self, message, epoch=None, step=None, mode=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.mode = mode

"""Exception hierarchy."""


class SplitGSError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SplitGSError, ValueError):
    pass


class DegenerateGaussianError(SplitGSError, ValueError):
    pass


class InvalidDepthError(SplitGSError, ValueError):
    pass


class InvalidConfigError(SplitGSError, ValueError):
    pass


class ContractViolationError(SplitGSError, RuntimeError):
    """An API precondition was not met (shape mismatch, stale cache, ...)."""


class TrainingDivergenceError(SplitGSError, FloatingPointError):
    """Raised when gradients or losses become non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PruneError(SplitGSError, RuntimeError):
    pass


class DatasetError(SplitGSError, IOError):
    pass


class CheckpointError(SplitGSError, IOError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass

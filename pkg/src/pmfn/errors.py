"""Exception types shared by every stage of the package."""


class PMFNError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PMFNError, ValueError):
    """Invalid argument, shape, or configuration value."""


class DegenerateInputError(ValidationError):
    """Input carries no usable signal (constant image, empty background...)."""


class StageDependencyError(PMFNError):
    """A pipeline stage was requested before the stage it depends on ran."""


class NonFiniteError(PMFNError, FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class TrainingDiverged(PMFNError, RuntimeError):
    """Loss became non-finite during training.

    The loss history recorded up to the failure is kept on ``history``.
    """

    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)

"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class InversionDivergedError(RuntimeError):
    """Raised when latent inversion produces a non-finite loss.

    ``trajectory`` holds the finite losses recorded before the failure.
    """

    def __init__(self, message, trajectory=()):
        super().__init__(message)
        self.trajectory = list(trajectory)


class CalibrationError(RuntimeError):
    """Raised when one or more calibration inversions fail."""

    def __init__(self, message, failed_indices=()):
        super().__init__(message)
        self.failed_indices = list(failed_indices)

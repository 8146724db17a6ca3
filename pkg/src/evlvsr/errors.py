"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates a documented precondition."""


class IntegrityError(RuntimeError):
    """Raised when a file is truncated, corrupt or fails its checksum."""


class ConfigMismatchError(RuntimeError):
    """Raised when a checkpoint was written for a different model config."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite.

    Attributes:
        record (dict): Diagnostic record describing the failing step.
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}

"""Exception types shared across the package.

Plain ``ValueError`` is used for invalid arguments; the classes below cover
failure modes callers need to distinguish programmatically.
"""


class StylemarkError(Exception):
    """Base class for package-specific failures."""


class TrainingDivergedError(StylemarkError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, step: int, loss: float, context: str = "training"):
        self.step = step
        self.loss = loss
        super().__init__(f"{context} diverged at step {step} (loss={loss!r})")


class FrozenModelError(StylemarkError):
    """Attempted gradient update on a frozen (pivot) model."""


class IncompatibleCheckpointError(StylemarkError):
    """Checkpoint file is corrupt or does not match the expected contract."""


class NumericalError(StylemarkError):
    """A numerical routine failed to converge to the required accuracy."""


class AttackError(StylemarkError):
    """An attack could not be applied (codec failure, contract violation)."""


class InversionError(StylemarkError):
    """Latent inversion diverged; carries the loss trace for diagnosis."""

    def __init__(self, message: str, loss_trace=None):
        self.loss_trace = list(loss_trace) if loss_trace is not None else []
        super().__init__(message)


class KeyNotFoundError(StylemarkError):
    """Requested key id is not present in the key store."""

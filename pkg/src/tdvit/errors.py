"""Exception types shared across the package."""


class TDViTError(Exception):
    """Base class for all package errors."""


class ConfigError(TDViTError, ValueError):
    """Invalid shapes, dimensions or configuration values."""


class UsageError(TDViTError, RuntimeError):
    """An operation was called in a state that does not allow it."""


class ColdStartError(UsageError):
    """Sampling was requested from an empty feature memory."""


class TrainingError(TDViTError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss

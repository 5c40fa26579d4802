"""Exception hierarchy for gpvit-desk

Every error raised on purpose by the package derives from GPViTError so the CLI
can turn it into a diagnostic and a nonzero exit code.
"""

from typing import Optional


class GPViTError(Exception):
    """Base class for all gpvit-desk errors"""
    pass


class ShapeError(GPViTError, ValueError):
    """Raised when operand shapes are incompatible"""
    pass


class ConfigError(GPViTError, ValueError):
    """Raised when a configuration or hyperparameter is invalid"""
    pass


class UsageError(GPViTError, RuntimeError):
    """Raised when an API is called outside its contract"""
    pass


class CheckpointError(GPViTError, ValueError):
    """Raised when a checkpoint is malformed or does not match its config"""
    pass


class DivergenceError(GPViTError, RuntimeError):
    """Raised when training produces a non-finite loss

    Attributes:
        last_good_epoch: Last epoch that finished with a finite loss (None if
            the very first epoch diverged)
    """

    def __init__(self, message: str, last_good_epoch: Optional[int] = None):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch

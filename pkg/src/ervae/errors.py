"""Exception types shared across the package."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or an iterative solver failed to converge."""


class ConfigError(ValueError):
    """An experiment config is malformed; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class TrainingError(RuntimeError):
    """Training diverged.

    ``checkpoint`` holds the last good parameter snapshot (name -> array) and
    ``epoch`` the epoch index at which the failure was detected.
    """

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class CertificationError(RuntimeError):
    """A learned embedding failed its pushforward or injectivity check."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class CheckpointError(ValueError):
    """A checkpoint's data file is missing or does not match its manifest."""

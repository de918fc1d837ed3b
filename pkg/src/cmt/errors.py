"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes, so raise the most specific class that
applies: ``ConfigError`` for bad configuration/flags, ``ShapeError`` for
dimension mismatches, ``InputError`` for invalid runtime data.
"""


class CmtError(Exception):
    """Base class for all package errors."""


class ShapeError(CmtError):
    """Tensor dimensions are inconsistent for the requested operation."""


class ConfigError(CmtError):
    """Invalid configuration value or combination."""


class InputError(CmtError):
    """Invalid runtime input (bad label, unknown token id, mismatched modality)."""


class EvaluationError(CmtError):
    """A function evaluation produced a non-finite or otherwise unusable value."""


class TrainingDiverged(CmtError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ServingError(CmtError):
    """Pipeline-level failure: stage refused to start, protocol violation,
    connection dropped, or a stage replied with an Error message."""


class StageTimeoutError(ServingError):
    """A stage failed to reply within the configured deadline."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage

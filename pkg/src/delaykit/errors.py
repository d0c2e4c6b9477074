"""Exception types shared across the toolkit."""


class DelayKitError(Exception):
    """Base class for all toolkit errors."""


class NonFiniteError(DelayKitError):
    """A computation produced or received NaN/Inf values."""


class GridMismatchError(DelayKitError):
    """Grids of two objects (history, solution, model) are incompatible."""


class DegenerateBoxError(DelayKitError):
    """A sampling box has zero volume."""


class EmptyDatasetError(DelayKitError):
    """Training requested on a dataset with no samples."""


class DivergedLossError(DelayKitError):
    """Training loss became non-finite.

    Carries the partial per-epoch history accumulated before the abort.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class CheckpointFormatError(DelayKitError):
    """Model checkpoint file is corrupt, truncated, or of a foreign format."""


class DatasetFormatError(DelayKitError):
    """Dataset file is corrupt, truncated, or of a foreign format."""


class DataGenerationError(DelayKitError):
    """Dataset generation failed (e.g. too many non-converged solves)."""


class ConfigError(DelayKitError):
    """Run configuration file is invalid."""

"""Exception types shared across the package."""


class MulanError(Exception):
    """Base class for all package errors."""


class ShapeError(MulanError):
    """Operand shapes violate an operation's contract."""


class DegenerateBatchError(MulanError):
    """Batch statistics requested over fewer than two rows."""


class NonFiniteError(MulanError):
    """An operation produced NaN or Inf."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(MulanError):
    """Invalid or inconsistent run configuration."""


class DataFormatError(MulanError):
    """A data file does not match its declared binary layout."""


class CheckpointError(MulanError):
    """Checkpoint is corrupt or incompatible with the current model."""

"""Exception hierarchy shared across the package."""


class DRVNetError(Exception):
    """Base class for all package errors."""


class ConfigError(DRVNetError, ValueError):
    """Invalid configuration or hyperparameters (detected at build time)."""


class InvalidInputError(DRVNetError, ValueError):
    """Input data has the wrong shape, range or content."""


class DatasetError(DRVNetError, OSError):
    """A dataset file is missing or cannot be decoded."""


class CheckpointError(DRVNetError):
    """Base class for checkpoint problems."""


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint tensors or config do not match the target architecture."""


class InvariantViolation(DRVNetError, RuntimeError):
    """An internal contract was broken; carries a diagnostics dict."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonFiniteLossError(InvariantViolation):
    pass

"""Exception hierarchy shared across the package."""


class KanjiNetError(Exception):
    """Base class for all package errors."""


class DimensionError(KanjiNetError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ConfigError(KanjiNetError, ValueError):
    """Invalid configuration or hyperparameter."""


class FormatError(KanjiNetError, ValueError):
    """A binary container could not be decoded."""


class TruncationError(FormatError):
    """Declared payload size does not match the bytes available."""


class UnsupportedLayoutError(FormatError):
    """Array stored in a memory order the parser does not handle."""


class IngestionError(KanjiNetError, OSError):
    """A file inside a dataset tree could not be read or decoded."""


class DivergenceError(KanjiNetError, RuntimeError):
    """Training loss became non-finite or exploded."""

    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"loss diverged at epoch {epoch}, batch {batch}: {loss!r}")


class TransferError(KanjiNetError, ValueError):
    """Base checkpoint stem does not match the target architecture."""


class CheckpointError(KanjiNetError, ValueError):
    """Checkpoint file is corrupt."""


class VersionError(CheckpointError):
    """Checkpoint written by an unsupported format version."""


class SpecMismatchError(CheckpointError):
    """Checkpoint architecture differs from the one requested."""


class IncompatibleError(ConfigError):
    """A checkpoint and a dataset (or two checkpoints) cannot be used together."""

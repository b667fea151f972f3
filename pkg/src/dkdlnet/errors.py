"""Exception types shared across the package.

The service and CLI map these onto HTTP status codes / process exit codes:
usage problems (bad arguments) are plain ``ValueError``; everything tied to
input files or datasets derives from ``DataError``; a diverging training run
raises ``DivergenceError``.
"""


class DataError(Exception):
    """A required input (file, dataset, checkpoint) is missing or malformed."""


class DivergenceError(Exception):
    """Training produced a non-finite loss and was aborted."""


class MatFormatError(DataError):
    """The file is not a readable MAT-v5 container."""


class MatTruncatedError(MatFormatError):
    """A MAT-v5 data element ends before its declared byte count."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(DataError):
    """Base for checkpoint (de)serialization failures."""


class NotACheckpointError(CheckpointError):
    """Magic bytes do not identify a checkpoint file."""


class TruncatedCheckpointError(CheckpointError):
    """Checkpoint file ends mid-record."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class ModelMismatchError(CheckpointError):
    """Checkpoint holds a different model than the caller expects."""

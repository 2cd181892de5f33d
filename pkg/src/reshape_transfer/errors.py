"""Exception hierarchy shared by every pipeline stage.

``DataError`` subclasses map to CLI exit code 2; anything caused by bad
command-line usage is handled by the CLI itself (exit code 64).
"""


class ReshapeTransferError(Exception):
    """Base class for all errors raised by this package."""


class DataError(ReshapeTransferError):
    """Input data is missing, malformed or inconsistent."""


class MalformedWav(DataError):
    pass


class UnsupportedEncoding(DataError):
    pass


class RateMismatch(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class EmptyDataset(DataError):
    pass


class EmptyValidation(DataError):
    pass


class InvalidClass(DataError, ValueError):
    pass


class LengthMismatch(DataError, ValueError):
    pass


class DimensionMismatch(ShapeError):
    pass


class EmptyModel(DataError):
    pass


class SingleClassError(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class CorruptFile(DataError):
    """Binary artifact failed its magic or checksum test."""


class CorruptCache(CorruptFile):
    pass


class CorruptCheckpoint(CorruptFile):
    pass


class VersionMismatch(DataError):
    pass


class DivergenceError(ReshapeTransferError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class ConvergenceWarning(UserWarning):
    """SMO stopped at the iteration cap before meeting its KKT tolerance."""

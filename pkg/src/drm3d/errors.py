"""Exception hierarchy shared across the package."""


class Drm3dError(Exception):
    """Base class for all package errors."""


class ConfigError(Drm3dError, ValueError):
    """Invalid or inconsistent configuration values."""


class ShapeError(Drm3dError, ValueError):
    """Array or tensor shapes do not line up."""


class UsageError(Drm3dError, RuntimeError):
    """An API was called in a state where it cannot run."""


class DivergenceError(Drm3dError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")


class DatasetFormatError(Drm3dError):
    """Base class for on-disk dataset/checkpoint format problems."""


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    def __init__(self, sequence: str, block: str):
        self.sequence = sequence
        self.block = block
        super().__init__(f"checksum mismatch in sequence {sequence!r}, {block}")


class OutOfRangeError(Drm3dError, IndexError):
    """A position or index falls outside the valid range."""

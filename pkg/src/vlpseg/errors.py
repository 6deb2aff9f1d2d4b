"""Exception hierarchy shared across the package."""


class VlpSegError(Exception):
    """Base class for every error raised by vlpseg."""


class ShapeError(VlpSegError, ValueError):
    pass


class DimensionError(ShapeError):
    """Image size is not a multiple of the patch size."""


class ChannelMismatchError(ShapeError):
    pass


class EmptyMaskError(VlpSegError):
    """A mask has no foreground pixel where at least one is required."""


class ZeroNormError(VlpSegError, ValueError):
    pass


class UnknownLabelError(VlpSegError, KeyError):
    pass


class FoldError(VlpSegError, ValueError):
    pass


class DataError(VlpSegError):
    """Bad or missing on-disk data (manifest, image, mask)."""


class ClassAbsentError(DataError):
    pass


class CheckpointError(VlpSegError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


class ModeMismatchError(CheckpointError):
    pass


class NonFiniteLossError(VlpSegError, FloatingPointError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class ConfigError(VlpSegError, ValueError):
    pass

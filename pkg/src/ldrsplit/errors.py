"""Exception types shared across the package."""


class LdrError(Exception):
    """Base class for every error raised by ldrsplit."""


class NotPositiveDefinite(LdrError, ValueError):
    pass


class NotSymmetric(LdrError, ValueError):
    pass


class ShapeMismatch(LdrError, ValueError):
    pass


class PartitionMismatch(LdrError, ValueError):
    pass


class MissingForwardCache(LdrError, RuntimeError):
    pass


class FormatError(LdrError, ValueError):
    """Malformed file or bitstream."""


class CountMismatch(FormatError):
    pass


class GeometryMismatch(LdrError, ValueError):
    pass


class ConfigError(LdrError, ValueError):
    pass


class MaskEmpty(LdrError, ValueError):
    pass


class DegenerateInput(LdrError, ValueError):
    pass


class ProfileMismatch(LdrError, ValueError):
    pass


class ModelMismatch(LdrError, ValueError):
    """Bitstream header was produced under a different quantization profile."""

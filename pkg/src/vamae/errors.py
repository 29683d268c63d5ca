"""Exception hierarchy shared across the package."""


class VamaeError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(VamaeError):
    """Shapes or sizes are incompatible (e.g. image not divisible by patch size)."""


class DegenerateImageError(VamaeError):
    """An image has too little variation for the requested operation."""


class EmptyMaskError(VamaeError):
    """A masked-patch loss was requested with no masked patches."""


class ConfigError(VamaeError):
    """Invalid configuration file, key, value, or invariant violation."""


class CheckpointError(VamaeError):
    """Checkpoint archive is malformed or incompatible with the model."""


class NanLossError(VamaeError):
    """Training produced a non-finite loss; aborted rather than skipped."""

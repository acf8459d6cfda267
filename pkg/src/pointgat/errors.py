"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration, data-format and
checkpoint problems exit with 2, anything else that escapes exits with 1.
"""


class PointgatError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PointgatError):
    """Invalid or inconsistent run configuration."""


class DataFormatError(PointgatError):
    """Malformed input data (xyz files, bad records)."""


class GeometryError(PointgatError):
    """Degenerate geometry, e.g. coincident points inside the cutoff."""


class VocabularyError(PointgatError):
    """Atomic number outside the configured vocabulary."""


class CheckpointError(PointgatError):
    """Unreadable or inconsistent checkpoint file."""


class NonFiniteGradientError(PointgatError):
    """A gradient became NaN or infinite during optimization."""

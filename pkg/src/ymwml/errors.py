"""Exception types shared across the package."""


class YmwmlError(Exception):
    """Base class for all package errors."""


class ShapeError(YmwmlError):
    """Invalid or inconsistent tensor shapes, axes, or element counts."""


class NonFiniteError(YmwmlError):
    """An operator produced or received NaN/Inf, or would (overflow, division by zero)."""


class TapeError(YmwmlError):
    """Backward requested through a tensor the active tape no longer knows about."""


class ConfigError(YmwmlError):
    """Invalid configuration value or unusable command-line input."""


class DataError(YmwmlError):
    """Dataset layout problems: missing files, bad labels, malformed split lines."""


class FormatError(YmwmlError):
    """Malformed serialized artifact (PGM file or checkpoint): bad magic, truncation."""

"""Exception types shared across the package.

Callers can catch ValueError for any validation failure; the subtypes exist so
tests and the CLI can tell failure modes apart.
"""


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending dimension."""


class ConfigError(ValueError):
    """Invalid configuration or operator geometry (e.g. non-positive output extent)."""


class DataError(ValueError):
    """Invalid data content, e.g. an out-of-range label; names the pixel when known."""


class UsageError(ValueError):
    """API misuse, e.g. backward() on a non-scalar tensor."""


class FileFormatError(ValueError):
    """Base for binary file format violations."""


class BadMagicError(FileFormatError):
    """File does not start with the expected magic bytes (offset 0)."""


class TruncatedPayloadError(FileFormatError):
    """File ends before the declared payload; message reports expected vs actual bytes."""


class ExtentOverflowError(FileFormatError):
    """Declared extents exceed the supported range (corrupt or hostile header)."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during fit; message carries epoch/batch diagnostics."""

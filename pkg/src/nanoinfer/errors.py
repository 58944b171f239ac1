"""Exception hierarchy shared across the toolkit.

CLI exit codes map onto these: ConfigError -> 2, data/format/validation
errors -> 3, CapacityError -> 4.
"""


class NanoInferError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(NanoInferError):
    """Tensor rank or dimension mismatch."""


class NumericError(NanoInferError):
    """Non-finite values where finite ones are required."""


class DomainError(NanoInferError):
    """Value outside the documented domain (bad probability vector, id out of range, ...)."""


class CapacityError(NanoInferError):
    """Sequence or buffer exceeds a configured capacity."""


class FormatError(NanoInferError):
    """Malformed serialized data."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionMismatchError(FormatError):
    """File declares an unsupported format version."""


class TruncatedFileError(FormatError):
    """File ends before the declared payload."""


class ShapeAuditError(FormatError):
    """Stored tensor shapes disagree with the declared model config."""


class ValidationError(NanoInferError):
    """Structural constraint violated (duplicate ids, incomplete maps, ...)."""


class RoutingError(NanoInferError):
    """Retrieval requested against an unusable index."""


class ConfigError(NanoInferError):
    """Invalid run configuration."""

"""Exception hierarchy.

Validation problems (bad geometry, bad files, bad parameters) map to CLI
exit code 2; numeric failures map to exit code 3.
"""


class FusecondError(Exception):
    """Base class for all package errors."""


class ValidationError(FusecondError):
    """Invalid input, configuration, or file content. CLI exit code 2."""


class GeometryError(ValidationError):
    """Image/mask/patch dimensions are inconsistent."""


class FormatError(ValidationError):
    """A serialized file is malformed or truncated."""


class ConfigError(ValidationError):
    """Run configuration is invalid or contains unknown keys."""


class FusionError(ValidationError):
    """Condition sources cannot be concatenated (dimension mismatch)."""


class SourceLookupError(ValidationError):
    """A named condition source is not present."""


class ParameterError(ValidationError):
    """A numeric parameter is out of its valid range."""


class EmptyRegionError(ValidationError):
    """A region mask selects no pixels where a non-empty region is required."""


class EmptyStructureError(ValidationError):
    """A voxel grid contains no active cells."""


class NumericError(FusecondError):
    """Non-finite values encountered during computation. CLI exit code 3."""

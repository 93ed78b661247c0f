"""Exception hierarchy shared by every module."""


class NearToFarError(Exception):
    """Base class for all package errors."""


class InvalidInputError(NearToFarError, ValueError):
    """Raised when arguments violate an operation's preconditions."""


class DegenerateGeometryError(NearToFarError):
    """Raised when points do not span a plane (collinear or too few)."""


class NoGroundPlaneError(NearToFarError):
    """RANSAC found no acceptable ground plane for this frame."""


class ParamsLoadError(NearToFarError):
    """Parameter file is corrupt, truncated or from another architecture."""


class ConfigError(NearToFarError):
    """Scene or run configuration is invalid."""


class DataError(NearToFarError):
    """A sequence directory or file on disk is malformed."""

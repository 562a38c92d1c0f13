"""Exception types raised by the registration library."""


class MeshregError(Exception):
    """Base class for all library errors."""


class InvalidCovarianceError(MeshregError):
    """Covariance matrix is not symmetric positive definite."""


class DomainError(MeshregError):
    """Scalar argument outside its mathematical domain."""


class EmptyInputError(MeshregError):
    """An operation received an empty mesh, feature set, or candidate list."""


class MeshValidationError(MeshregError):
    """Mesh failed ingest validation (bad indices, degenerate faces, ...)."""


class TopologyError(MeshregError):
    """Mesh topology unsuitable for the query (e.g. non-manifold edge)."""


class BehindCameraError(MeshregError):
    """Point does not project: at or behind the camera plane."""


class DegenerateOrientationError(MeshregError):
    """3D orientation has no usable image-plane component."""


class DegenerateGeometryError(MeshregError):
    """Normal equations are rank deficient; pose is not identifiable."""


class EmptyInlierError(MeshregError):
    """Outlier rejection removed every match."""


class InfeasibleInitializationError(MeshregError):
    """A camera optical center is outside the feasible interior at the start."""


class CountShortfallError(MeshregError):
    """Scene generation could not reach the requested visible-point count."""

    def __init__(self, requested: int, achieved: int):
        self.requested = requested
        self.achieved = achieved
        super().__init__(
            f"requested {requested} visible points but only {achieved} available"
        )


class ConfigError(MeshregError):
    """Configuration file or flag set is invalid."""


class InputFileError(MeshregError):
    """An input file is missing or failed to parse."""

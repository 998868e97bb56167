"""Exception types shared across the package."""


class CochsimError(Exception):
    """Base class for all package-specific errors."""


class NearPiRotation(CochsimError):
    """SE(3)/SO(3) logarithm requested too close to a half-turn rotation.

    The caller controls station spacing; hitting this means the input frames
    are too far apart and must be resampled more densely.
    """


class ParseError(CochsimError):
    """A file could not be parsed in the declared format."""


class EmptyMesh(CochsimError):
    """Mesh file contained no usable triangles."""


class DegeneratePolyline(CochsimError):
    """Centerline polyline has repeated consecutive points."""


class NoIntersection(CochsimError):
    """A slicing plane does not intersect the mesh."""


class DegenerateContour(CochsimError):
    """Cross-section contour has rank-zero in-plane covariance."""


class ParallelAxes(CochsimError):
    """Station frame construction failed: major axis parallel to tangent."""


class OutOfRange(CochsimError):
    """Arc-length query outside the model domain beyond the clamp tolerance."""


class DegenerateTangents(CochsimError):
    """Surface tangents are linearly dependent; no contact frame exists."""


class DimensionMismatch(CochsimError):
    """State vector dimensions inconsistent with the model discretization."""


class NonConvergence(CochsimError):
    """Newton iteration failed to converge; treated as a stall indicator."""

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"Newton did not converge after {iterations} iterations "
            f"(residual {residual:.3e})"
        )


class SingularA(CochsimError):
    """Differentiated equilibrium-constraint matrix is rank deficient."""


class NoOverlap(CochsimError):
    """Force traces share no common abscissa range."""


class AxisUndefined(CochsimError):
    """Lumen lacks spiral metadata and the plane fit is unreliable."""


class EmptyPlans(CochsimError):
    """Direction aggregation called with no usable plans."""


class ConfigError(CochsimError):
    """Run configuration is malformed or contains unknown keys."""

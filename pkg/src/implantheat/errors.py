"""Exception hierarchy shared by all solver layers."""


class ImplantHeatError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(ImplantHeatError):
    """Invalid or degenerate geometry (zero-length branch, bad coordinates, ...)."""


class OutOfDomainError(GeometryError):
    """A wire branch or evaluation point leaves the voxel grid."""


class FieldEvaluationError(ImplantHeatError):
    """Field requested at a point where the source kernel is singular."""


class AssemblyError(ImplantHeatError):
    """Matrix or load-vector assembly failed (unknown material, singular pair, ...)."""


class SolverError(ImplantHeatError):
    """Linear-algebra failure (singular system, breakdown)."""


class ConvergenceError(SolverError):
    """An iterative solver did not reach its tolerance within the iteration cap."""

    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class FactorizationError(SolverError):
    """Incomplete or dense factorization broke down."""


class ConfigError(ImplantHeatError):
    """Scenario configuration is malformed or inconsistent."""

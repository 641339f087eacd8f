"""Exception hierarchy shared by every fsynth module."""


class FsynthError(Exception):
    """Base class for all errors raised by fsynth."""

    #: stage label attached by the CLI when an error propagates out of a run
    stage = None


class ValidationError(FsynthError, ValueError):
    """Malformed input: bad shapes, invalid configuration, unparseable files."""


class DimensionError(ValidationError):
    """Operands do not live on the same grid or have incompatible lengths."""


class DomainError(ValidationError):
    """An object lies outside the domain of an embedding or its inverse."""


class InfeasibleLevelError(ValidationError):
    """The requested conformal level cannot be attained with the available periods."""


class NumericalError(FsynthError, ArithmeticError):
    """A numerical routine failed (ill-conditioning, singular systems)."""


class SolverError(NumericalError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, gap=None, iterations=None):
        super().__init__(message)
        self.gap = gap
        self.iterations = iterations


class ConvergenceError(SolverError):
    """Alternating projections did not converge; ``residual`` holds the last change."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message, gap=residual, iterations=iterations)
        self.residual = residual


class RankDeficiencyError(NumericalError):
    """A Gram matrix that must be invertible is singular."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)

"""Exception types raised across the package."""


class RdflError(Exception):
    """Base class for all package errors."""


class SingularMatrix(RdflError):
    """A pivot fell below the relative singularity threshold."""


class ShapeMismatch(RdflError, ValueError):
    """Array shapes do not chain as required."""


class DimensionMismatch(RdflError, ValueError):
    """Vector or dataset dimensions disagree."""


class InfeasibleSpec(RdflError, ValueError):
    """Program data describes an empty feasible region."""


class Infeasible(RdflError):
    """The interior-point solver found no feasible point."""


class MaxIterations(RdflError):
    """The solver stopped before meeting its tolerances.

    The best iterate is attached as ``solution`` (may be None).
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class SingularKKT(RdflError):
    """The KKT sensitivity system is singular (degenerate active set)."""


class NotConverged(RdflError):
    """A fixed-point iteration did not reach its tolerance."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class UnstableEquilibrium(RdflError):
    """The loop Jacobian at the equilibrium is not a contraction."""

    def __init__(self, message, rho_hat=None):
        super().__init__(message)
        self.rho_hat = rho_hat


class WorldModelDiverges(RdflError):
    """The synthetic ground-truth response is not a contraction."""


class ParseError(RdflError, ValueError):
    """Malformed dataset file; carries the offending row and column."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class TrainingAborted(RdflError):
    """Too many samples in one epoch were non-differentiable."""

"""Exception hierarchy shared across the package."""


class WqmpcError(Exception):
    """Base class for all package errors."""


class NetworkError(WqmpcError):
    """Invalid network description (syntax or topology)."""


class HydraulicsError(WqmpcError):
    """Invalid or unusable hydraulic schedule."""


class ModelError(WqmpcError):
    """State-space assembly or simulation failure."""


class SolverError(WqmpcError):
    """Controller/optimization failure."""


class InfeasibleProblem(SolverError):
    """Constrained control problem has no feasible point."""

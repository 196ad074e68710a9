class DualMpcError(Exception):
    """Base class for errors raised by dualmpc."""


class DimensionError(DualMpcError, ValueError):
    pass


class InvalidProblemError(DualMpcError, ValueError):
    """The problem data violates a structural assumption (PD Hessian, box, rows)."""


class SlaterError(DualMpcError, ValueError):
    """A supplied point is not strictly feasible for the coupling constraints."""


class InfeasibleError(DualMpcError):
    """The coupling constraints cannot be met anywhere in the box."""


class AdmissibilityError(DualMpcError, ValueError):
    """An accuracy parameter exceeds what the feasibility argument allows."""


class ConvergenceError(DualMpcError, RuntimeError):
    pass

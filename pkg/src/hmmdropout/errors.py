"""Exception types shared across the package."""


class ModelError(Exception):
    """Base class for all errors raised by this package."""


class InputError(ModelError):
    """A file or configuration could not be parsed."""


class ValidationError(ModelError):
    """A data or parameter invariant is violated."""


class SpecMismatchError(ModelError):
    """Objects built for incompatible model dimensions were combined."""


class NumericalError(ModelError):
    """A computation produced a non-finite or degenerate result."""


class UnboundedLogitError(NumericalError):
    """A cumulative logit is undefined because a tail probability is 0 or 1."""


class ComponentDeathError(NumericalError):
    """A mixture component lost essentially all posterior mass.

    Carries the mixing weights computed before the failure so callers can
    inspect which component collapsed.
    """

    def __init__(self, message, tau=None):
        super().__init__(message)
        self.tau = tau


class DegenerateFitError(ModelError):
    """Every start of a multistart EM run collapsed or failed."""


class BoundaryError(ModelError):
    """Covariance requested at a boundary point where it is undefined."""

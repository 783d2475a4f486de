"""Exception hierarchy shared by every module."""


class MarkovEMError(Exception):
    """Base class for all package errors."""


class SpecError(MarkovEMError):
    """A model specification violates one or more invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(MarkovEMError):
    """Panel data are malformed or contradict the model structure."""


class ContractError(MarkovEMError):
    """A caller broke a function precondition."""


class DomainError(MarkovEMError, ValueError):
    """Numeric input outside the function domain (e.g. NaN, inf)."""


class DegenerateIndividualError(MarkovEMError):
    """Every replicate of an individual has zero weight."""


class InitializationError(MarkovEMError):
    """Starting values could not be computed."""


class BudgetExceededError(MarkovEMError):
    """Exact enumeration refused because too many cells are missing."""


class InfeasibleBridgeError(MarkovEMError):
    """The conditioning end state cannot be reached from the start state."""


class ConvergenceWarning(UserWarning):
    """An iterative procedure stopped before meeting its tolerance."""

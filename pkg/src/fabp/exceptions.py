"""Exception hierarchy shared by the library and mapped to CLI exit codes."""


class FabError(Exception):
    """Base class for all errors raised by fabp."""


class FabDomainError(FabError, ValueError):
    """An argument is outside the domain of the function."""


class DegenerateTargetError(FabDomainError):
    """The direct coordinate has zero variance, so no null-space basis exists."""


class ConditioningError(FabError, ArithmeticError):
    """A covariance matrix that must be positive definite is not."""


class FitError(FabError):
    """A linking-model or likelihood fit failed.

    ``diagnostics`` carries whatever the fitting routine could report
    (start points, objective values, optimizer messages).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RankError(FitError):
    """A design matrix is rank deficient."""

    def __init__(self, message, columns=(), diagnostics=None):
        super().__init__(message, diagnostics)
        self.columns = tuple(columns)


class SeparationError(FitError):
    """Logistic regression estimates diverge (perfect or quasi separation)."""

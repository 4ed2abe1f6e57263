"""Exception hierarchy shared by every module."""


class FmbsdeError(Exception):
    """Base class for all library errors."""


class DomainError(FmbsdeError, ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(FmbsdeError, ValueError):
    """Inputs are individually valid but inconsistent with each other."""


class SingularCovarianceError(FmbsdeError, ValueError):
    """A covariance matrix could not be factorized."""


class NumericalError(FmbsdeError, RuntimeError):
    """An iterative method failed to converge or diverged."""


class PreconditionError(FmbsdeError, ValueError):
    """A sampled precondition check found a witness against it."""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness

"""Exception hierarchy shared by every flatreg module."""


class FlatRegError(Exception):
    """Base class for all errors raised by flatreg."""


class NonSymmetric(FlatRegError, ValueError):
    pass


class DomainError(FlatRegError, ValueError):
    """A scalar function was applied outside its domain."""


class NotPSD(FlatRegError, ValueError):
    pass


class StepTooLarge(FlatRegError, ValueError):
    """The step size violates the stability margin of a contraction argument."""


class EdgeOfStability(FlatRegError, ValueError):
    """Some Hessian eigenvalue makes the implicit regularizer diverge.

    Raised instead of clamping: eta * lambda_max >= 2 (1 + beta) means the
    configuration is outside the regime the regularizer describes.
    """

    def __init__(self, message, eigenvalue=None, eta=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue
        self.eta = eta


class TooLarge(FlatRegError, ValueError):
    pass


class InvalidP(FlatRegError, ValueError):
    pass


class InsufficientSamples(FlatRegError, ValueError):
    pass


class ConfigError(FlatRegError, ValueError):
    pass

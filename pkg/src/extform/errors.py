"""Exception hierarchy.

Errors fall into two families so the command line can map them onto exit
codes: :class:`UsageError` (bad input, exit 2) and :class:`NumericalError`
(a computation failed, exit 1).
"""


class ExtformError(Exception):
    """Base class for all package errors."""


class UsageError(ExtformError):
    """Invalid input or configuration."""


class NumericalError(ExtformError):
    """A numerical procedure failed."""


# symbolic / autodiff

class FormError(UsageError):
    pass


class ShapeMismatch(FormError):
    pass


class NonlinearArgumentUse(FormError):
    pass


class ArgumentMismatch(FormError):
    """Terms of a sum do not carry the same form arguments."""


class ArityError(FormError):
    pass


class SpaceMismatch(FormError):
    pass


class IndexOutOfRange(FormError, IndexError):
    pass


# external operators

class UnknownImplementation(UsageError, KeyError):
    pass


class UnboundCoefficient(UsageError, KeyError):
    pass


class HigherDerivativeUnsupported(UsageError, NotImplementedError):
    pass


class WeightsFormatError(UsageError, ValueError):
    pass


class NonFiniteLoss(NumericalError):
    pass


# fem

class NonConvergence(NumericalError):
    pass


class SingularMatrix(NumericalError):
    pass


class NewtonDivergence(NumericalError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


# inverse

class CflViolation(NumericalError):
    pass


class NonFiniteState(NumericalError):
    pass


class LengthMismatch(UsageError, ValueError):
    pass


class StaleTape(ExtformError):
    pass


class LineSearchFailure(NumericalError):
    pass


class ConfigError(UsageError):
    pass

"""Exception hierarchy shared by every module of the package."""


class SlowFastError(Exception):
    """Base class for all errors raised by :mod:`slowfast`."""


class InputError(SlowFastError, ValueError):
    """Caller supplied arguments that violate an operation's preconditions."""


class ConfigError(InputError):
    """Malformed or unknown configuration content."""


class NumericalError(SlowFastError, ArithmeticError):
    """An iterative numerical routine did not reach its tolerance.

    Attributes
    ----------
    residual : float or None
        Last residual seen before giving up, when meaningful.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ModelError(SlowFastError):
    """A coefficient function raised while being evaluated."""

    def __init__(self, message, offending_input=None):
        super().__init__(message)
        self.offending_input = offending_input


class AssumptionGateError(SlowFastError):
    """Sampled structural hypotheses do not hold (e.g. beta <= 2 L')."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class StepError(NumericalError):
    """Resolvent failure inside a time step, tagged with the particle index."""

    def __init__(self, message, particle=None, residual=None):
        super().__init__(message, residual)
        self.particle = particle


class DivergenceError(SlowFastError):
    """The state became non-finite; ``last_finite`` holds the last good snapshot."""

    def __init__(self, message, last_finite=None, partial=None):
        super().__init__(message)
        self.last_finite = last_finite
        self.partial = partial


class NonConvergenceError(SlowFastError):
    """Fixed-point iteration stopped contracting."""

    def __init__(self, message, gaps=None):
        super().__init__(message)
        self.gaps = list(gaps) if gaps is not None else []


class InsufficientSignalError(SlowFastError):
    """A decay fit had fewer than three points above the noise floor."""

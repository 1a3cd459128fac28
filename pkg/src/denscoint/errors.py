"""Exception hierarchy.

Input-type errors map to CLI exit code 2, numerical failures to exit code 3.
"""


class DenscointError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InputError(DenscointError):
    exit_code = 2


class NumericalError(DenscointError):
    exit_code = 3


class DimensionError(InputError, ValueError):
    """Array shapes or grids do not agree."""


class DomainNonPositive(InputError, ValueError):
    """A density has a value that is zero, negative or numerically zero."""


class DensityOverflowError(NumericalError, OverflowError):
    """Exponentiating a clr function lost precision beyond the clip guard."""


class FormatError(InputError):
    """Malformed input file or input table."""


class ConfigError(InputError):
    """Invalid configuration values."""


class DegenerateBasis(NumericalError):
    """Seed functions for Gram-Schmidt are (nearly) linearly dependent."""


class NotSingular(NumericalError):
    """A(1) is numerically invertible, so 1 is not a spectrum point."""


class NotI1(NumericalError):
    """The I(1) condition on the operator pencil fails."""


class Indeterminate(NumericalError):
    """The pole order could not be read off the growth rate."""


class RankError(NumericalError):
    """Requested dimension exceeds the numerical rank."""


class SingularWeight(NumericalError):
    """The weighting matrix of a generalized eigenproblem is singular."""


class EmptyWindow(NumericalError):
    """No observation falls inside the kernel window."""


class NotConverged(NumericalError):
    """Newton iterations did not reach the gradient tolerance."""


class DegenerateData(InputError):
    """Data have no spread (e.g. equal 1st and 99th percentiles)."""


class BandwidthSelectionFailed(NumericalError):
    """Every candidate bandwidth failed to produce an estimate."""


class EstimationError(NumericalError):
    """Log-density estimation failed at one or more mesh points."""

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = list(points)


class PipelineError(DenscointError):
    """Wraps a failure in one pipeline stage, with the stage and period."""

    def __init__(self, stage, cause, period=None):
        where = stage if period is None else f"{stage} (period {period})"
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.period = period
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)

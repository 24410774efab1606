"""Exception types raised across the toolkit."""


class FragilityError(Exception):
    """Base class for toolkit errors."""


class DimensionMismatchError(FragilityError, ValueError):
    pass


class DimensionTooLargeError(FragilityError, ValueError):
    pass


class FpOverflowError(FragilityError, OverflowError):
    """A strict rounding produced a non-finite value."""


class ZeroScoreError(FragilityError, ZeroDivisionError):
    """Score matrix has zero norm, so kappa_score is undefined."""


class SmallGainViolation(FragilityError, ValueError):
    """A residual gain rho >= 1 makes the exact relaxation factor vacuous."""


class ConstantSeriesError(FragilityError, ValueError):
    pass


class NonPositiveValueError(FragilityError, ValueError):
    pass


class SampleTooSmallError(FragilityError, ValueError):
    pass


class ConfigError(FragilityError, ValueError):
    """Configuration validation failed; ``violations`` lists every problem."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("\n".join(self.violations))


class NoConvergenceWarning(RuntimeWarning):
    pass

"""Exception hierarchy shared across the package."""


class PullSimError(Exception):
    """Base class for all package errors."""


class ConfigError(PullSimError):
    """A single violated configuration invariant."""


class BetaSumViolation(ConfigError):
    pass


class NonPositiveParameter(ConfigError):
    pass


class SlotsExceedBuffer(ConfigError):
    pass


class RateProfileShape(ConfigError):
    pass


class InvalidDistribution(ConfigError):
    pass


class ValidationError(PullSimError):
    """Raised by ``validate`` with every violated invariant attached."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "; ".join(f"{type(e).__name__}: {e}" for e in self.errors)
        super().__init__(f"{len(self.errors)} invalid setting(s): {lines}")


class NTooSmall(PullSimError):
    pass


class NotSubcritical(PullSimError):
    pass


class NoIdleMass(PullSimError):
    pass


class ShapeMismatch(PullSimError):
    pass


class InvalidState(PullSimError):
    pass


class PhantomDeparture(PullSimError):
    """A departure fired at an empty server (engine consistency bug)."""


class LedgerInconsistent(PullSimError):
    pass


class DominanceViolation(PullSimError):
    """Coupled systems stopped being ordered; carries the event context."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context or {}


class InitialStateNotDominated(PullSimError):
    pass


class InsufficientBatches(PullSimError):
    pass


class InvariantViolation(PullSimError):
    """Internal simulation invariant broke (queue bounds, conservation)."""

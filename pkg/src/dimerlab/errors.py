"""Exception types shared across dimerlab modules."""


class DimerlabError(Exception):
    """Base class for all dimerlab-specific errors."""


class InvalidSpec(DimerlabError):
    """A cell specification violates a structural requirement.

    Carries the full list of violations in ``.violations``.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class TooLarge(DimerlabError):
    """Requested exact computation exceeds the hard size cap."""


class BudgetExceeded(DimerlabError):
    """Work estimate exceeds the configured budget (see DIMERLAB_BUDGET)."""


class NotLiquidPhase(DimerlabError):
    """Spectral curve does not have exactly two simple zeros on the torus."""


class NewtonDivergence(DimerlabError):
    """Newton refinement of a spectral zero failed to converge."""


class QuadratureNotConverged(DimerlabError):
    """Momentum-space quadrature did not reach the requested tolerance."""


class PairingImpossible(DimerlabError):
    """Endpoint pairing inside a merged face cannot be completed."""


class NotClockwiseOdd(DimerlabError):
    """No chord direction restores clockwise-odd parity on both subfaces."""


class RatioNotUnit(DimerlabError):
    """Cross-validation ratio of two sign conventions is not +-1."""


class DimensionMismatch(DimerlabError):
    """Array arguments have incompatible shapes for the requested operation."""


class NumericalFailure(DimerlabError):
    """A numerical routine produced an unusable result (NaN, rank loss, ...)."""


class InsufficientStatistics(DimerlabError):
    """Monte Carlo sample is too small for the requested estimate."""


class CoincidentPoints(DimerlabError):
    """Continuum prediction requested at coincident insertion points."""

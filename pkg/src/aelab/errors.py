"""Exception hierarchy shared by all aelab modules."""


class AelabError(Exception):
    """Base class for every error raised by aelab."""


class ConvexityError(AelabError, ValueError):
    """Input flagged or required convex fails the midpoint test."""


class DomainError(AelabError, ValueError):
    """Empty, disconnected or exceeded finite domain."""


class LegendreDomainError(DomainError):
    """The dual grid is not covered by the gradient range of the primal grid."""


class StencilError(AelabError, ValueError):
    """A finite-difference stencil touches the boundary or a +inf node."""


class TruncationError(AelabError, ArithmeticError):
    """The estimated mass outside the truncated box exceeds the tail budget."""


class DivergentIntegralError(TruncationError):
    """The integrand grows towards the box boundary; the integral diverges.

    ``sign`` is the sign of the integrand in the growing region, so callers
    can report the integral as ``sign * inf``.
    """

    def __init__(self, message, sign=1.0):
        super().__init__(message)
        self.sign = sign


class CurvatureError(AelabError, ArithmeticError):
    """Non-positive Hessian determinant or curvature where positivity is needed."""


class NotNormalizedError(AelabError, ValueError):
    pass


class BarycenterError(AelabError, ValueError):
    pass


class SizeCapError(AelabError, ValueError):
    pass


class InfeasibleError(AelabError, ValueError):
    pass


class RankDeficiencyError(AelabError, ValueError):
    pass


class OriginNotInteriorError(AelabError, ValueError):
    pass


class SearchError(AelabError, RuntimeError):
    pass


class OptimizerError(AelabError, RuntimeError):
    pass

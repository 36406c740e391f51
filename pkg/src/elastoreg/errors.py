"""Exception types shared across the package.

Every error raised on a documented failure path derives from ElastoregError,
so the CLI can map any of them to a single-line diagnostic and a nonzero
exit code.
"""


class ElastoregError(Exception):
    """Base class for all package errors."""

    kind = "error"


class InvalidArgumentError(ElastoregError, ValueError):
    kind = "invalid-argument"


class SingularElementError(ElastoregError):
    kind = "singular-element"


class UnderConstrainedError(ElastoregError):
    kind = "under-constrained"


class SolverFailureError(ElastoregError):
    kind = "solver-failure"

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class RegularizationTooWeakError(ElastoregError):
    kind = "regularization-too-weak"

    def __init__(self, message, smallest_pivot=None):
        super().__init__(message)
        self.smallest_pivot = smallest_pivot


class DivergenceError(ElastoregError):
    kind = "divergence"

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class UndefinedMetricError(ElastoregError):
    kind = "undefined-metric"


class MeshIncompatibilityError(ElastoregError):
    kind = "incompatibility"


class ConfigError(ElastoregError):
    kind = "config"

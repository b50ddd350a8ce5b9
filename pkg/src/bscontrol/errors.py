"""Error taxonomy.

Every message names the violated assumption (A1-A8, see README) or the
module contract, so CLI exit codes and logs stay greppable.
"""


class BSControlError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(BSControlError):
    """Invalid configuration value (exit code 2)."""


class GeometryAssumptionError(ConfigurationError):
    """A geometric assumption (A1-A3) is violated."""


class ResolutionError(ConfigurationError):
    """Grid or weight tables cannot resolve the requested setup."""


class ParameterError(ConfigurationError):
    """Weight parameters out of their admissible range."""

    def __init__(self, message: str, threshold: float | None = None):
        super().__init__(message)
        self.threshold = threshold


class ContractError(BSControlError):
    """An operation precondition was violated by the caller."""


class SmallnessViolationError(BSControlError):
    """Data too large for the small-data regime (exit code 3).

    Raised on Newton non-convergence and on outer-loop non-contraction.
    """

    def __init__(self, message: str, step: int | None = None,
                 residual: float | None = None):
        super().__init__(message)
        self.step = step
        self.residual = residual


class ConditioningError(BSControlError):
    """Iterative solve stagnated (exit code 4)."""

    def __init__(self, message: str, iterations: int | None = None,
                 ritz_min: float | None = None, ritz_max: float | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.ritz_min = ritz_min
        self.ritz_max = ritz_max


class WeightClampError(BSControlError):
    """A combined exponent exceeded the clamp threshold away from t=0,T."""

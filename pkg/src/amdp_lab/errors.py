"""Exception hierarchy shared by every module.

Each class carries a stable ``code`` string so CLI reports and verification
failures can be matched by machines as well as humans.
"""


class AmdpError(Exception):
    code = "AMDP_ERROR"


class ModelValidationError(AmdpError, ValueError):
    code = "MODEL_INVALID"


class DimensionMismatch(AmdpError, ValueError):
    code = "DIMENSION_MISMATCH"


class AssumptionViolated(AmdpError):
    """The chain is not unichain/aperiodic (or mixing too slowly to certify)."""

    code = "ASSUMPTION_VIOLATED"


class DomainError(AmdpError, ValueError):
    code = "DOMAIN_ERROR"


class NoConvergence(AmdpError):
    code = "NO_CONVERGENCE"


class FeatureDegenerate(AmdpError):
    code = "FEATURE_DEGENERATE"


class MonotonicityViolated(AmdpError):
    code = "MONOTONICITY_VIOLATED"


class InvalidPerturbation(AmdpError, ValueError):
    code = "INVALID_PERTURBATION"


class Divergence(AmdpError, FloatingPointError):
    code = "DIVERGENCE"


class ConfigError(AmdpError, ValueError):
    """Config validation failure; ``path`` is the dotted field path."""

    code = "CONFIG_INVALID"

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path

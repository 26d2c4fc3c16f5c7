"""Exception types shared across the package."""


class DimensionMismatch(ValueError):
    """Array shapes are inconsistent with the problem dimensions."""


class NotStronglyConvex(ValueError):
    """QP cost matrix fails the minimum-eigenvalue threshold."""


class Infeasible(RuntimeError):
    """QP constraint set is empty."""


class MaxIterationsExceeded(RuntimeError):
    """Iterative procedure hit its iteration cap before converging."""


class SingularSensitivity(RuntimeError):
    """Sensitivity system is numerically singular (degenerate active set)."""


class SingularMass(ValueError):
    """Plant generalized-mass denominator is not positive."""


class TrainingSetViolation(RuntimeError):
    """Retrained policy still violates a training scenario; no certificate."""


class ConfigError(ValueError):
    """Experiment configuration is malformed; message carries the key path."""

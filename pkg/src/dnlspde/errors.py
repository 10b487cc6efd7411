"""Exception types shared across the package."""


class InvalidExponentError(ValueError):
    """Raised when a norm or flux exponent is outside its admissible range."""


class SolverError(RuntimeError):
    """Base class for nonlinear-solver failures."""


class StepNonconvergedError(SolverError):
    """Newton iteration exhausted its budget without meeting the tolerance.

    Carries the residual history so the caller can inspect the stall.
    """

    def __init__(self, message, residual_history=None, step_index=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])
        self.step_index = step_index


class StepDivergedError(SolverError):
    """A NaN or Inf showed up inside a nonlinear solve."""

    def __init__(self, message, residual_history=None, step_index=None):
        super().__init__(message)
        self.residual_history = list(residual_history or [])
        self.step_index = step_index


class InverseNonconvergedError(SolverError):
    """Scalar inversion of the saturation function failed to bracket the root
    down to tolerance.  Carries the last bracket."""

    def __init__(self, message, bracket=None):
        super().__init__(message)
        self.bracket = bracket


class EnsembleError(RuntimeError):
    """Too many Monte Carlo paths failed for the ensemble to be trusted."""


class ConfigError(ValueError):
    """Configuration file rejected.  ``errors`` lists every violation found,
    each prefixed with the offending key path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))

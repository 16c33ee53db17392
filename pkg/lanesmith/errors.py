class LanesmithError(Exception):
    """Base class for all errors raised by lanesmith."""
    pass

class ValidationError(LanesmithError, ValueError):
    """Raised when a value violates the invariants of its type."""
    pass

class ConfigError(ValidationError):
    """Raised when a configuration document has unknown keys or wrong types."""
    pass

class InvalidScenarioError(LanesmithError):
    """Raised when a scenario cannot be placed without overlapping vehicles."""
    pass

class SolverError(LanesmithError):
    """Base class for numerical failures inside the CILQR solver."""
    pass

class NotPositiveDefiniteError(SolverError):
    """Raised when the regularized control hessian cannot be factorized."""

    def __init__(self, stage, regularization):
        self.stage = stage
        self.regularization = regularization
        super().__init__(
            f"Q_uu + {regularization:g}*I is not positive definite at stage {stage}"
        )

class DivergenceError(SolverError):
    """Raised when no line-search step reduces the cost at maximum regularization."""
    pass

class TraceIOError(LanesmithError, OSError):
    """Raised when a trace or summary file cannot be written or read back."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")

class RegistrationError(Exception):
    """Base exception for registration and force estimation errors"""
    pass

class InvalidMeshError(RegistrationError):
    """Raised when a tetrahedral mesh violates its invariants"""
    pass

class DataFormatError(RegistrationError):
    """Raised when data format is unsupported or corrupted"""
    pass

class FileAccessError(RegistrationError):
    """Raised when file cannot be read or written"""
    pass

class ConfigurationError(RegistrationError):
    """Raised when labels, boundary conditions or settings are inconsistent"""
    pass

class InvalidArgumentError(RegistrationError, ValueError):
    """Raised when an operation receives an out-of-range argument"""
    pass

class ConsistencyError(RegistrationError):
    """Raised when cached projections no longer match the deformed surface"""
    pass

class DegenerateConfigurationError(RegistrationError):
    """Raised when a rigid fit is rank deficient (collinear or coincident points)"""
    pass

class SolverError(RegistrationError):
    """Base class for failures of the equilibrium and adjoint solvers"""
    pass

class NewtonConvergenceError(SolverError):
    """Raised when Newton iterations do not reach the residual tolerance"""

    def __init__(self, message: str, last_residual: float, iterations: int):
        super().__init__(message)
        self.last_residual = last_residual
        self.iterations = iterations

class SingularSystemError(SolverError):
    """Raised when a constrained tangent system cannot be solved"""

    def __init__(self, message: str, residual_norm: float = float("nan")):
        super().__init__(message)
        self.residual_norm = residual_norm

class GradientAuditError(RegistrationError):
    """Raised when the adjoint gradient disagrees with finite differences"""

    def __init__(self, message: str, errors=None):
        super().__init__(message)
        self.errors = list(errors or [])

class LabError(Exception):
    """Base class for all custom exceptions in the laboratory."""
    def __init__(self, message: str, details: dict = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

class ParameterError(LabError):
    """Raised for invalid arguments (counts, ranges, empty inputs)."""
    pass

class ParseError(LabError):
    """Raised when a world, config, params or adapter file cannot be read."""
    pass

class ContractError(LabError):
    """Raised on shape or dimension mismatches between matrices."""
    pass

class NumericalError(LabError):
    """Raised when a linear system cannot be solved reliably."""
    pass

class SingularFeatures(NumericalError):
    """Raised when duplicate feature vectors make an exact fit impossible."""
    pass

class SingularGram(NumericalError):
    """Raised when the Gram matrix of edit features is ill-conditioned."""
    pass

class OracleFailed(NumericalError):
    """Raised when the numerical minimality oracle does not converge."""
    pass

class StaleBaseFact(LabError):
    """Raised when the base model does not currently predict the edited fact."""
    pass

class DegenerateError(LabError):
    """Base class for zero or linearly dependent inputs."""
    pass

class DegenerateFeatures(DegenerateError):
    pass

class DegenerateInput(DegenerateError):
    pass

class DegenerateAdapter(DegenerateError):
    pass

class DegenerateBasis(DegenerateError):
    pass

class AcceptanceFailure(LabError):
    """Raised when a --check gate fails."""
    pass

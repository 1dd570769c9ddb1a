"""Exception types raised across the package."""


class DmlaError(Exception):
    """Base class for all package errors."""


class InvalidPartitionError(DmlaError, ValueError):
    pass


class DataValidationError(DmlaError, ValueError):
    """Raised when input data violates a table or listing invariant."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class DegenerateNormError(DataValidationError):
    pass


class TransformError(DataValidationError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DegenerateGridError(DmlaError, ValueError):
    pass


class DegenerateTreatmentError(DmlaError, ValueError):
    pass


class EstimationError(DmlaError, RuntimeError):
    def __init__(self, message, fold=None, model=None):
        super().__init__(message)
        self.fold = fold
        self.model = model


class IncomparableRunsError(DmlaError, ValueError):
    pass


class ConfigurationError(DmlaError, ValueError):
    pass


class FinalTagError(DmlaError, ValueError):
    """A response whose <final> answer could not be extracted."""


class MissingFinalError(FinalTagError):
    pass


class AmbiguousFinalError(FinalTagError):
    pass


class FinalParseError(FinalTagError):
    pass


class ServiceError(DmlaError, RuntimeError):
    pass


class PredictionUnavailableError(DmlaError, RuntimeError):
    def __init__(self, message, attempts=0, last_response=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_response = last_response

"""Exception hierarchy shared by every module."""


class CorrNoiseError(Exception):
    """Base class for all library errors."""


class ValidationError(CorrNoiseError, ValueError):
    """Input document, matrix, trace or store failed validation."""


class InfeasibleError(ValidationError):
    """A configuration cannot be satisfied (coverage, tile budget, ...)."""


class OutOfRangeError(CorrNoiseError, IndexError):
    pass


class StateError(CorrNoiseError, RuntimeError):
    """An ordered operation was called out of sequence."""


class CapacityExceededError(CorrNoiseError):
    def __init__(self, shortfall_bytes: int):
        self.shortfall_bytes = int(shortfall_bytes)
        super().__init__(f"noise history exceeds total capacity by {self.shortfall_bytes} bytes")

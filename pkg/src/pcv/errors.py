"""Exception types shared across the package."""


class PCVError(Exception):
    pass


class DimensionError(PCVError, ValueError):
    pass


class DomainError(PCVError, ValueError):
    pass


class UsageError(PCVError, ValueError):
    pass


class FormatError(PCVError, ValueError):
    pass


class ParseError(PCVError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(PCVError, ArithmeticError):
    pass


class TrainingError(PCVError, RuntimeError):
    pass


class SoundnessError(PCVError, RuntimeError):
    """Raised when interval propagation produces lower > upper."""

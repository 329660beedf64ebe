"""Exception hierarchy shared by every scmil module."""


class SCMILError(Exception):
    """Base class for all library errors."""


class DimensionError(SCMILError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(SCMILError, ValueError):
    """A configuration value is out of range or inconsistent."""


class DomainError(SCMILError, ValueError):
    """A function was evaluated outside its mathematical domain."""


class FormatError(SCMILError, ValueError):
    """A binary or text file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(SCMILError, ValueError):
    """A record in a manifest or config failed validation."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class UndefinedMetricError(SCMILError, ArithmeticError):
    """A survival metric has no defined value for the given data."""


class OptimizerStateError(SCMILError, RuntimeError):
    """Optimizer was stepped without gradients."""


class NonFiniteError(SCMILError, FloatingPointError):
    """A computation produced NaN or infinity."""

"""Exception hierarchy shared by every module."""


class CoupledFlowError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CoupledFlowError, ValueError):
    """Shapes, lengths or hyperparameters are inconsistent."""


class InputError(CoupledFlowError, ValueError):
    """A runtime input violates an operation's precondition."""


class NumericalError(CoupledFlowError, ArithmeticError):
    """A linear solve or moment computation is degenerate."""


class InsufficientDataError(CoupledFlowError, ValueError):
    """A Monte Carlo estimate has too few effective samples."""


class TrainingError(CoupledFlowError, RuntimeError):
    """Optimisation diverged.

    ``last_good`` carries whatever state was valid before the failure
    (a checkpoint-like object or ``None``).
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class IntegrationError(CoupledFlowError, RuntimeError):
    """ODE integration produced a non-finite state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigParseError(CoupledFlowError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(CoupledFlowError, IOError):
    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)

"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid configuration or arguments."""


class ValidationError(ValueError):
    """Input data failed a shape or finiteness check."""


class ContractError(RuntimeError):
    """A documented precondition was violated (empty mask, bad timestep, ...)."""


class NumericError(ArithmeticError):
    """A computation would underflow or otherwise lose meaning."""


class TrainingAborted(RuntimeError):
    """Raised when a loss turns non-finite; carries the last good checkpoint."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step

class ConfigError(ValueError):
    """Invalid configuration or precondition on user-supplied settings."""


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A non-finite value appeared; ``index`` locates it (batch row or step)."""

    def __init__(self, message: str, index=None):
        super().__init__(message if index is None else f"{message} (at index {index})")
        self.index = index


class InsufficientDataError(RuntimeError):
    pass


class VerificationError(AssertionError):
    pass

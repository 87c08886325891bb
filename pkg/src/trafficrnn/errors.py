class ShapeError(ValueError):
    """Raised when array shapes do not fit together."""


class DataError(ValueError):
    """Raised for malformed or unusable input data."""


class DivergenceError(ArithmeticError):
    """Raised when a numeric quantity becomes NaN or infinite."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step

"""Exception types shared across the engine."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class NumericalFailureError(ArithmeticError):
    """A non-finite value appeared. ``step`` names the chain step or iteration."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ResourceLimitError(RuntimeError):
    pass

"""Exception types shared across the toolkit."""


class ViewEditError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(ViewEditError, ValueError):
    pass


class DegenerateInput(ViewEditError, ValueError):
    pass


class InsufficientData(ViewEditError, ValueError):
    pass


class NotFound(ViewEditError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericFailure(ViewEditError, ArithmeticError):
    """A loss or parameter became non-finite during an optimization."""

    def __init__(self, message, step=None, frame=None):
        super().__init__(message)
        self.step = step
        self.frame = frame

    def __str__(self):
        parts = [self.args[0]]
        if self.frame is not None:
            parts.append(f"frame={self.frame}")
        if self.step is not None:
            parts.append(f"step={self.step}")
        return " ".join(str(p) for p in parts)

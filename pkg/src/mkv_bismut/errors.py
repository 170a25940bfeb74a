"""Exception hierarchy shared by all modules."""


class MkvBismutError(Exception):
    """Base class for every error raised by the package."""


class EmptyInputError(MkvBismutError, ValueError):
    pass


class DimensionMismatchError(MkvBismutError, ValueError):
    pass


class EpsilonOutOfRangeError(MkvBismutError, ValueError):
    pass


class EnvelopeViolationError(MkvBismutError, ValueError):
    """A test function exceeds the 1 + |x|^k envelope on a support point."""


class LadderInvalidError(MkvBismutError, ValueError):
    pass


class LadderTooShortError(LadderInvalidError):
    pass


class EpsListInvalidError(LadderInvalidError):
    pass


class NodeOutOfRangeError(MkvBismutError, ValueError):
    pass


class GridMismatchError(MkvBismutError, ValueError):
    pass


class ShapeMismatchError(MkvBismutError, ValueError):
    pass


class LambdaZeroError(MkvBismutError, ValueError):
    pass


class ConfigInvalidError(MkvBismutError, ValueError):
    pass


class NonFiniteStateError(MkvBismutError, FloatingPointError):
    def __init__(self, node: int, what: str = "particle state"):
        super().__init__(f"non-finite {what} at node {node}")
        self.node = node


class MaxIterExceededError(MkvBismutError, RuntimeError):
    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class DivergedError(MkvBismutError, RuntimeError):
    """Fixed-point residuals grew for several consecutive iterations."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics

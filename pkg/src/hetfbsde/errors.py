"""Exception hierarchy shared by all modules."""


class HetFBSDEError(Exception):
    """Base class for library errors."""


class InvalidInput(HetFBSDEError, ValueError):
    pass


class InvalidSpec(InvalidInput):
    pass


class InvalidWitness(InvalidInput):
    pass


class UnsupportedDerivative(HetFBSDEError, NotImplementedError):
    pass


class DivergenceError(HetFBSDEError, FloatingPointError):
    """Raised when a recursion produces non-finite values.

    ``stage`` names the routine, ``step`` the time index where it happened.
    """

    def __init__(self, message, stage=None, step=None, history=None):
        super().__init__(message)
        self.stage = stage
        self.step = step
        self.history = history


class ScenarioError(InvalidInput):
    pass

"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``ConfigError`` -> 2, ``DataError`` -> 3,
``NumericalError`` -> 4.
"""


class MisalignError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MisalignError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(InvalidArgumentError):
    """A run configuration cannot be resolved."""


class DataError(MisalignError):
    """Input data is missing, malformed, or inconsistent."""


class LayerLoadError(DataError):
    """A geometry file cannot be turned into an areal layer."""


class NumericalError(MisalignError, ArithmeticError):
    """A factorization or decomposition failed."""


class ChainError(NumericalError):
    """A Gibbs chain failed mid-run.

    Attributes
    ----------
    iteration : int
        Zero-based iteration at which the failure occurred.
    last_state : ChainState
        The last state that passed validation.
    """

    def __init__(self, message, iteration, last_state):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.last_state = last_state

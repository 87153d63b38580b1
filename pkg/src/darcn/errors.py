"""Exception hierarchy shared by every subsystem.

The CLI maps these onto exit codes: ``DataError``/``ContractError`` -> 2,
``NumericalError`` -> 3.
"""


class DarcnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DarcnError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(DarcnError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(DarcnError, ValueError):
    """An architecture or training configuration is invalid."""


class DataError(DarcnError, ValueError):
    """Input data (audio, manifests, checkpoints) is unusable."""


class NumericalError(DarcnError, ArithmeticError):
    """A NaN/Inf appeared or a numerical audit failed."""

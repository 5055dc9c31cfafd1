"""Exception hierarchy shared by every normdiff module."""


class NormdiffError(Exception):
    """Base class for all errors raised by normdiff."""


class ContractError(NormdiffError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor or matrix shapes are incompatible."""


class DataValidationError(NormdiffError, ValueError):
    """Input data (CSV rows, cohort columns, configs) failed validation."""


class NumericalError(NormdiffError, ArithmeticError):
    """A computation produced non-finite values or diverged."""


class RunLockedError(NormdiffError, RuntimeError):
    """The run directory is owned by another process."""


# Exit codes used by the command line interface
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

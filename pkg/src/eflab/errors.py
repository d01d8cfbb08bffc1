"""Exception hierarchy. Each class maps onto a stable CLI exit code."""


class EflabError(Exception):
    exit_code = 1


class ConfigError(EflabError, ValueError):
    exit_code = 2


class DataError(EflabError, ValueError):
    exit_code = 3


class NumericError(EflabError, ArithmeticError):
    exit_code = 4


class BudgetError(EflabError, RuntimeError):
    exit_code = 5


class DomainError(NumericError, ValueError):
    """An argument fell outside the mathematical domain of a function."""


class CapacityError(DataError):
    """An insertion would push a sequence past its configured maximum length."""


class UnreachableStateError(DataError):
    """No data sequence can produce the queried noisy state."""

"""
Exceptions raised across jmflex.

Every error derives from JMFlexError and from the builtin it refines, so
callers can catch either.
"""


class JMFlexError(Exception):
    """Base class for all jmflex errors."""


class ConfigurationError(JMFlexError, ValueError):
    """Invalid basis, term, model or configuration file."""


class DataError(JMFlexError, ValueError):
    """Invalid or inconsistent input data."""

    def __init__(self, message: str, row: int = None, table: str = None) -> None:
        self.row = row
        self.table = table
        if row is not None:
            message = f'{table or "data"} row {row}: {message}'
        super().__init__(message)


class DimensionError(JMFlexError, ValueError):
    """Shape mismatch between arrays that must agree."""


class DomainError(JMFlexError, ValueError):
    """Parameter outside its admissible domain, e.g. a nonpositive variance."""


class NumericalError(JMFlexError, ArithmeticError):
    """Non-finite evaluation or a numerical routine that failed to terminate."""

    def __init__(self, message: str, block: str = None) -> None:
        self.block = block
        if block is not None:
            message = f'[{block}] {message}'
        super().__init__(message)


class NonConcaveBlock(JMFlexError, RuntimeError):
    """Block Hessian is not negative definite, even after ridging."""

    def __init__(self, block: str, message: str = 'Hessian is not negative definite') -> None:
        self.block = block
        super().__init__(f'[{block}] {message}')


class FitFailure(JMFlexError, RuntimeError):
    """Fit did not succeed within the restart budget."""

    def __init__(self, message: str, restarts: int = 0, block: str = None) -> None:
        self.restarts = restarts
        self.block = block
        super().__init__(message)

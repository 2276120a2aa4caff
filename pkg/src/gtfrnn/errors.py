"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: config errors -> 2, numeric
divergence -> 3, I/O and format errors -> 4.
"""


class GtfrnnError(Exception):
    """Base class for all package errors."""


class ContractError(GtfrnnError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(GtfrnnError, ValueError):
    """Invalid or inconsistent configuration."""


class DivergenceError(GtfrnnError, ArithmeticError):
    """A state or gradient norm exceeded the divergence threshold."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class NumericError(GtfrnnError, ArithmeticError):
    """A non-finite value was produced where one is not allowed."""


class ConditioningError(GtfrnnError, ArithmeticError):
    """A matrix is too ill-conditioned for the requested operation."""

    def __init__(self, msg, cond=None):
        super().__init__(msg)
        self.cond = cond


class FormatError(GtfrnnError, IOError):
    """A file does not conform to the expected binary/CSV format."""

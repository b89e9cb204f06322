"""Exception hierarchy shared by the library and the command line."""


class QuailError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(QuailError, ValueError):
    """Invalid configuration or argument."""

    exit_code = 1


class DataError(QuailError, ValueError):
    """Input data does not satisfy its schema, or a required file is missing."""

    exit_code = 2


class BudgetError(QuailError, RuntimeError):
    """A privacy-budget allocation would exceed what is left in a ledger."""

    exit_code = 3

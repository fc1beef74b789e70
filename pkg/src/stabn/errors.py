"""Exception hierarchy shared across the package.

Every error maps onto one CLI exit code: usage problems exit 1, bad data or
file formats exit 2, numerical aborts exit 3.
"""


class StabnError(Exception):
    exit_code = 2


class ConfigurationError(StabnError, ValueError):
    """A layer or model configuration is internally inconsistent."""

    exit_code = 1


class UsageError(StabnError, ValueError):
    exit_code = 1


class InputError(StabnError, ValueError):
    """Data handed to an operation violates its precondition."""

    exit_code = 2


class FormatError(StabnError):
    """A binary file has the wrong magic, version, layout, or checksum."""

    exit_code = 2


class NumericalError(StabnError, ArithmeticError):
    exit_code = 3

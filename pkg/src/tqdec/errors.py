"""Exception hierarchy shared by every module.

The CLI maps each class to a distinct exit code, so raising the right
type is part of the public contract.
"""


class TqdecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(TqdecError):
    """Invalid configuration: bad value, unknown key, unsupported option."""


class DataError(TqdecError):
    """Bad input data: malformed file, missing sample, empty memory."""


class NumericError(TqdecError):
    """Non-finite values where finite ones are required."""


class ContractError(TqdecError):
    """A documented precondition was violated by the caller."""


class DimensionError(ContractError):
    """Shape mismatch between operands. Message names both shapes."""

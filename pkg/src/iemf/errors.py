"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: validation problems (shape, contract,
config, format, bad indices) exit 2, numeric failures exit 3, OS-level I/O
errors exit 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible or malformed shapes."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class FormatError(ValueError):
    """A container file or structured input is malformed."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or an update had to abort."""


VALIDATION_ERRORS = (ShapeError, ContractError, ConfigError, FormatError, IndexError)

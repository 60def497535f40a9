"""Exception hierarchy shared by every FDAN module.

Each class carries an ``exit_code`` and a short ``category`` so the command
line front end can map failures to distinct, machine-parsable exits.
"""


class FdanError(Exception):
    category = "error"
    exit_code = 1


class ShapeError(FdanError, ValueError):
    category = "shape"
    exit_code = 3


class NumericError(FdanError, ArithmeticError):
    category = "numeric"
    exit_code = 4


class ConfigError(FdanError, ValueError):
    category = "config"
    exit_code = 5


class FormatError(FdanError, ValueError):
    category = "format"
    exit_code = 6


class RangeError(FormatError):
    category = "range"
    exit_code = 7


class GraphError(FdanError, RuntimeError):
    """Autograd bookkeeping failed (cycle, missing leaf, missing gradient)."""

    category = "internal"
    exit_code = 8


class TrainingError(FdanError, RuntimeError):
    category = "training"
    exit_code = 9

"""Exception hierarchy shared by every module.

Library code raises these; main.py turns them into "❌ ..." lines and exit codes.
"""


class MtevcError(Exception):
    exit_code = 2


class UsageError(MtevcError):
    exit_code = 1


class InvalidInputError(MtevcError, ValueError):
    pass


class ShapeError(MtevcError, ValueError):
    pass


class UnknownCodeError(MtevcError, ValueError):
    pass


class AlignmentError(MtevcError, ValueError):
    pass


class DataError(MtevcError):
    pass


class CompatibilityError(MtevcError):
    pass


class StorageError(MtevcError, OSError):
    pass


class StateError(MtevcError, RuntimeError):
    pass


class TrainingDivergedError(MtevcError, ArithmeticError):
    exit_code = 3


class NonFiniteError(TrainingDivergedError):
    """A forward op produced NaN or inf."""


class SingularityError(MtevcError, ArithmeticError):
    exit_code = 3


class GradientCheckError(MtevcError, ArithmeticError):
    exit_code = 3

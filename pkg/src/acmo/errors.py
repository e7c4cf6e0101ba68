"""Exception hierarchy shared by every module and mapped to CLI exit codes."""


class AcmoError(Exception):
    exit_code = 2


class ShapeError(AcmoError, ValueError):
    """Tensor extents do not satisfy an operation's contract."""


class DataError(AcmoError, ValueError):
    """Inputs are empty, malformed or out of range."""


class NumericError(AcmoError, ArithmeticError):
    exit_code = 3


class FrozenTensorError(AcmoError, RuntimeError):
    """An update touched a tensor in the frozen partition."""


class ChecksumError(DataError):
    pass


class FormatError(DataError):
    pass

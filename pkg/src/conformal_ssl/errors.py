"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ConformalSSLError(Exception):
    exit_code = 1
    kind = "error"


class InvalidArgumentError(ConformalSSLError, ValueError):
    exit_code = 3
    kind = "config"


class ShapeError(InvalidArgumentError):
    pass


class CalibrationError(ConformalSSLError):
    exit_code = 3
    kind = "config"


class SplitError(ConformalSSLError):
    exit_code = 3
    kind = "config"


class ParseError(ConformalSSLError):
    exit_code = 4
    kind = "io"


class NumericError(ConformalSSLError, ArithmeticError):
    exit_code = 5
    kind = "numeric"

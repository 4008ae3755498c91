"""Exception types raised by the library.

Every class derives from :class:`LutqError` so callers (and the CLI) can map
failures onto exit-code categories.
"""


class LutqError(Exception):
    exit_code = 1


class ShapeError(LutqError, ValueError):
    exit_code = 2


class NonFiniteError(LutqError, FloatingPointError):
    exit_code = 5


class ConstraintError(LutqError, ValueError):
    exit_code = 2


class ModeError(LutqError, ValueError):
    exit_code = 6


class FormatError(LutqError, ValueError):
    exit_code = 4


class DataError(LutqError, ValueError):
    exit_code = 3


class ConfigError(LutqError, ValueError):
    exit_code = 2

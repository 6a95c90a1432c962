"""Exception types raised across lamina."""


class LaminaError(Exception):
    """Base class for all lamina errors."""


class ShapeError(LaminaError, ValueError):
    pass


class SingularMatrixError(LaminaError, ValueError):
    pass


class OrderingError(LaminaError, RuntimeError):
    """An operation was called before the operation it depends on."""


class MissingStateError(LaminaError, KeyError):
    def __init__(self, machine, key):
        self.machine = machine
        self.key = key
        super().__init__(f"no state stored for machine={machine!r} key={key!r}")

    def __str__(self):
        return self.args[0]


class ConfigError(LaminaError, ValueError):
    pass


class EmptyInputError(LaminaError, ValueError):
    pass


class MissingAssessmentError(LaminaError, ValueError):
    pass


class FormatError(LaminaError, ValueError):
    """Malformed input file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=0, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path is not None else ""
        super().__init__(f"{where}{message} (at byte offset {offset})")

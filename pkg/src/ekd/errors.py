"""Exception hierarchy shared by every ekd module."""


class EKDError(Exception):
    """Base class for all errors raised by ekd."""


class DimensionError(EKDError, ValueError):
    pass


class DomainError(EKDError, ValueError):
    pass


class ContractError(EKDError, RuntimeError):
    pass


class NumericError(EKDError, ArithmeticError):
    pass


class ConfigError(EKDError, ValueError):
    pass


class EnsembleShapeError(DimensionError):
    """Teachers in an ensemble disagree on width, length or tap set."""


class InputTooShortError(EKDError, ValueError):
    pass


class DegenerateInputError(EKDError, ValueError):
    pass


class CheckpointParseError(EKDError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointVersionError(EKDError, ValueError):
    pass


class CompatibilityError(EKDError, ValueError):
    pass


class SchemaVersionError(EKDError, ValueError):
    pass

class EmptyInputError(ValueError):
    """An operation needed at least one valid element and got none."""


class StateError(RuntimeError):
    """An object is missing state required by the operation."""


class FormatError(ValueError):
    """A file does not follow the expected byte layout."""


class UnsupportedVersionError(FormatError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values appeared during a numeric computation."""

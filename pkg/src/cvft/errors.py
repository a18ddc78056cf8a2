"""Exception hierarchy.

``exit_code`` is what the command line maps an uncaught error to: 1 for input
or configuration problems, 2 for numeric or runtime failures.
"""


class CVFTError(Exception):
    exit_code = 2


class ValidationError(CVFTError, ValueError):
    exit_code = 1


class ShapeMismatch(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class InvalidPermutation(ValidationError):
    pass


class BatchTooSmall(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class EmptyQuerySet(ValidationError):
    pass


class MissingGeoTags(ValidationError):
    pass


class NumericError(CVFTError, ArithmeticError):
    exit_code = 2


class ZeroVector(NumericError):
    pass


class NonFiniteValue(NumericError):
    pass


class NonFiniteGradient(NonFiniteValue):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class DegenerateRow(NumericError):
    pass


class DegenerateColumn(NumericError):
    pass


class DomainError(NumericError):
    pass

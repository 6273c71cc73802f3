"""Exception types raised across the package.

Everything derives from :class:`MochiError` so callers (the CLI in
particular) can catch one base class. Input-shape problems also derive from
``ValueError`` so generic numeric code behaves as expected.
"""


class MochiError(Exception):
    pass


class InvalidInput(MochiError, ValueError):
    pass


class ZeroVectorError(InvalidInput):
    pass


class DimensionMismatch(InvalidInput):
    pass


class ShapeMismatch(InvalidInput):
    pass


class BadShape(InvalidInput):
    pass


class EmptyInput(InvalidInput):
    pass


class NonFinite(InvalidInput):
    pass


class TooFewPoints(InvalidInput):
    pass


class BatchTooLarge(InvalidInput):
    pass


class LabelLengthMismatch(InvalidInput):
    pass


class MissingLabels(InvalidInput):
    pass


class EmptyNegatives(InvalidInput):
    pass


class NonPositiveTemperature(InvalidInput):
    pass


class TooFewNegatives(InvalidInput):
    pass


class TruncationTooSmall(InvalidInput):
    pass


class NotEnoughNegatives(InvalidInput):
    pass


class NoEligibleNegatives(MochiError):
    """No negative survives filtering for a query; the query is skipped."""


class BadProvenance(InvalidInput):
    pass


class LabelUniverseMismatch(InvalidInput):
    pass


class ClassTooSmall(InvalidInput):
    pass


class RejectionBudgetExceeded(MochiError):
    pass


class ParseError(InvalidInput):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InconsistentWidth(ParseError):
    pass


class ConfigInvalid(InvalidInput):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key

"""Exception hierarchy.

Validation problems derive from :class:`ValidationError` (CLI exit code 1),
numerical problems from :class:`NumericalError` (CLI exit code 2).
"""


class InflRiskError(Exception):
    pass


class ValidationError(InflRiskError, ValueError):
    pass


class NumericalError(InflRiskError, ArithmeticError):
    pass


# ingest
class MissingValue(ValidationError):
    pass


class UnbalancedPanel(ValidationError):
    pass


class UnknownRegion(ValidationError):
    pass


class UnknownIncome(ValidationError):
    pass


class DuplicateCountry(ValidationError):
    pass


class NonPositivePrice(ValidationError):
    pass


# preprocess
class TooShort(ValidationError):
    pass


class DegenerateSeries(ValidationError):
    pass


class OptimizerFailure(NumericalError):
    pass


# mldfm
class RankDeficiency(ValidationError):
    pass


class NoConvergence(NumericalError):
    pass


# faqr
class RankDeficientDesign(NumericalError):
    pass


class Unbounded(NumericalError):
    pass


class SolverFailure(NumericalError):
    pass


class SingularHessian(NumericalError):
    pass


class SingularRestriction(NumericalError):
    pass


class ZeroDenominator(NumericalError):
    pass


# density
class InvalidParams(ValidationError):
    pass


class DegenerateQuantiles(ValidationError):
    pass


# evaluate
class WrongGridLength(ValidationError):
    pass


class ZeroVariance(NumericalError):
    pass


class WindowTooLarge(ValidationError):
    pass

"""Exception and warning types shared across the package."""


class CountGANError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(CountGANError, ValueError):
    """Bad user input: configs, specs, arguments."""


class InvalidSpec(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class InvalidAnnotation(ValidationError):
    pass


class InvalidExclusion(ValidationError):
    pass


class ModeViolation(ValidationError):
    pass


class FractionError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class GridEmpty(ValidationError):
    pass


class EmptyGlyphClass(ValidationError):
    pass


class PlacementInfeasible(CountGANError):
    """Rejection sampling ran out of retries for one image."""


class MissingImage(CountGANError, FileNotFoundError):
    pass


class DataError(CountGANError):
    """A dataset item could not be read."""


class NonFiniteLoss(CountGANError, FloatingPointError):
    def __init__(self, term, value=None):
        self.term = term
        self.value = value
        super().__init__(f"non-finite loss term {term!r}: {value}")


class DomainError(CountGANError, ValueError):
    pass


class NumericalFailure(CountGANError, ArithmeticError):
    pass


class InsufficientSamples(CountGANError):
    pass


class InsufficientSamplesWarning(UserWarning):
    """Some count combinations have fewer items than requested."""

    def __init__(self, shortfall):
        self.shortfall = dict(shortfall)
        desc = ", ".join(f"{list(k)}: {v}" for k, v in sorted(self.shortfall.items()))
        super().__init__(f"combinations below target (have): {desc}")

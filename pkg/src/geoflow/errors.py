"""Exception hierarchy shared by all geoflow modules."""


class GeoflowError(Exception):
    """Base class for all library errors."""


class InputError(GeoflowError, ValueError):
    """Argument outside its documented domain."""


class SingularityError(GeoflowError, ArithmeticError):
    """Evaluation at a point where the formula is singular."""


class NumericError(GeoflowError, ArithmeticError):
    """Non-finite value produced during a computation."""


class StiffnessError(NumericError):
    """Adaptive ODE solver could not keep the step size above its floor."""

    def __init__(self, message, t=None, h=None, steps=None, rejected=None):
        super().__init__(message)
        self.t = t
        self.h = h
        self.steps = steps
        self.rejected = rejected


class ParseError(GeoflowError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnderConcentrationError(GeoflowError, ValueError):
    """Sample resultant too small to define a mean direction."""

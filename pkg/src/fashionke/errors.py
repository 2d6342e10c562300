"""Exception hierarchy shared by every fashionke module."""


class FashionKEError(Exception):
    """Base class for all library errors."""


class InvalidShape(FashionKEError, ValueError):
    pass


class InvalidLabel(FashionKEError, ValueError):
    pass


class InvalidToken(FashionKEError, ValueError):
    pass


class NumericalFailure(FashionKEError, ArithmeticError):
    pass


class EmptySequence(FashionKEError, ValueError):
    pass


class OntologyError(FashionKEError, ValueError):
    pass


class ConfigError(FashionKEError, ValueError):
    pass


class InvalidTransitionMatrix(FashionKEError, ValueError):
    pass


class SplitError(FashionKEError, ValueError):
    pass


class ParseError(FashionKEError, ValueError):
    """Malformed dataset file; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DivergenceError(FashionKEError, ArithmeticError):
    pass


class EmptyTestSet(FashionKEError, ValueError):
    pass


class IncompatibleCheckpoint(FashionKEError, ValueError):
    pass

from django.core.exceptions import ImproperlyConfigured


class DycafError(Exception):
    """
    Base class for every error raised by dycaf itself.
    """


class ShapeError(DycafError, ValueError):
    pass


class NonFiniteError(DycafError, ArithmeticError):
    """
    A NaN or Inf reached a tensor. ``where`` names the parameter, operation or
    solver iteration that produced it when that is known.
    """
    def __init__(self, message, where=None):
        super(NonFiniteError, self).__init__(message)
        self.where = where


class DuplicateParameterError(DycafError, ValueError):
    pass


class UnknownParameterError(DycafError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ''


class SolverDivergenceError(DycafError, ArithmeticError):
    def __init__(self, message, iteration):
        super(SolverDivergenceError, self).__init__(message)
        self.iteration = iteration


class ContractionError(DycafError, ArithmeticError):
    """
    The implicit backward iteration is not contracting, so the linear system
    around the fixed point has no convergent Neumann series.
    """
    def __init__(self, message, iteration, update_norms=()):
        super(ContractionError, self).__init__(message)
        self.iteration = iteration
        self.update_norms = list(update_norms)


class NormalizationError(DycafError, ValueError):
    pass


class ConfigError(DycafError, ImproperlyConfigured):
    def __init__(self, message, lineno=None, key=None):
        if lineno is not None:
            message = "line %d: %s" % (lineno, message)
        super(ConfigError, self).__init__(message)
        self.lineno = lineno
        self.key = key


class TensorFormatError(DycafError, ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class DimensionMismatchError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass

"""Exception types raised by coxmeta.

The CLI maps the three families onto exit codes: configuration problems (2),
bad input data (3) and numerical failures (4).
"""


class CoxMetaError(Exception):
    """Base class for all package errors."""


class ConfigError(CoxMetaError, ValueError):
    exit_code = 2


class DataError(CoxMetaError, ValueError):
    exit_code = 3


class NumericError(CoxMetaError, ArithmeticError):
    exit_code = 4


class EmbeddingError(NumericError):
    """Circulant embedding has eigenvalues too negative to clamp."""


class IntensityOverflow(NumericError):
    pass


class IntegratorDiverged(NumericError):
    pass

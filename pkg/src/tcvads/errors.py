"""Exception hierarchy.

Every error carries an ``exit_code`` used by the CLI: 2 for invalid input or
configuration, 3 for numerical failures.
"""


class TcvadsError(Exception):
    exit_code = 2


class ShapeError(TcvadsError, ValueError):
    pass


class SequenceTooShortError(ShapeError):
    pass


class ParameterError(TcvadsError, ValueError):
    pass


class EmptyInputError(TcvadsError, ValueError):
    pass


class ConfigurationError(TcvadsError, ValueError):
    pass


class TrainingDataError(TcvadsError, ValueError):
    pass


class FormatError(TcvadsError, ValueError):
    pass


class LengthError(FormatError):
    pass


class CoverageError(TcvadsError, ValueError):
    pass


class MissingEmbeddingError(TcvadsError, KeyError):
    pass


class UndefinedMetricError(TcvadsError, ValueError):
    pass


class NumericalError(TcvadsError, ArithmeticError):
    exit_code = 3


class DegenerateVectorError(NumericalError):
    pass


class EvaluationError(NumericalError):
    pass

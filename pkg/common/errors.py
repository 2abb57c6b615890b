"""
Exception hierarchy shared by every LEGCNet component
"""


class LegcnetError(Exception):
    """Base class for all pipeline errors"""


class InvalidSpecError(LegcnetError, ValueError):
    """Layer widths, shapes or other structural arguments are invalid"""


class DimensionMismatchError(LegcnetError, ValueError):
    """An input does not match the network or mask it is used with"""


class DivergenceError(LegcnetError, ArithmeticError):
    """Training produced a non-finite loss"""

    def __init__(self, message, epoch=None, iteration=None):
        super().__init__(message)
        self.epoch = epoch
        self.iteration = iteration


class OutOfOrderIterationError(LegcnetError, ValueError):
    """A trajectory sink received an iteration that is not strictly increasing"""


class SeriesTooShortError(LegcnetError, ValueError):
    """A series is shorter than the operation requires"""


class DegenerateSeriesError(LegcnetError, ValueError):
    """A series has zero variance"""


class InsufficientDataError(LegcnetError, ValueError):
    """Too few valid points or pairs to produce an estimate"""


class ZeroMagnitudeError(DegenerateSeriesError):
    """Direct divergence estimate requested on a window starting at zero"""


class RankDeficiencyError(LegcnetError, ValueError):
    """Design matrix is not of full column rank"""


class SingularKernelError(LegcnetError, ValueError):
    """Kernel SHAP regression system is singular; more coalition samples are needed"""


class FormatError(LegcnetError, ValueError):
    """Binary or text file has a bad magic number, version or is truncated"""


class SchemaError(LegcnetError, ValueError):
    """Tabular data does not match the declared schema"""


class ProbeTooShortError(LegcnetError, ValueError):
    """Partial-training probe yields fewer windows than the causality test needs"""


class ConfigError(LegcnetError, ValueError):
    """Experiment configuration is invalid"""


class MissingRowsError(LegcnetError, LookupError):
    """Report rows required by a table are missing"""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("Missing report rows: " + ", ".join(self.missing))

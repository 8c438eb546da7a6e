"""Exception hierarchy shared by all modules."""


class JkoError(Exception):
    """Base class for all library errors."""


class NumericalError(JkoError):
    """Numerical failure; the CLI maps these to exit code 3."""


class ConfigError(JkoError):
    """Invalid configuration; the CLI maps these to exit code 2."""


class NotPositiveDefinite(NumericalError):
    pass


class NotSymmetric(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, message, iteration=None, terms=None):
        super().__init__(message)
        self.iteration = iteration
        self.terms = terms or {}


class PretrainDiverged(NumericalError):
    pass


class MaxIterationsExceeded(NumericalError):
    pass


class NonFinitePosition(NumericalError):
    pass


class NegativeDensity(NumericalError):
    pass


class NonFiniteLogRatio(NumericalError):
    def __init__(self, message, sample=None):
        super().__init__(message)
        self.sample = sample


class SingularBandwidth(NumericalError):
    pass


class DegenerateAcceptance(NumericalError):
    pass


class DimensionMismatch(JkoError, ValueError):
    pass


class StageOutOfRange(JkoError, IndexError):
    pass


class MalformedLine(JkoError, ValueError):
    def __init__(self, lineno, line):
        super().__init__(f"malformed LIBSVM line {lineno}: {line!r}")
        self.lineno = lineno


class NonBinaryLabels(JkoError, ValueError):
    pass


class CorruptManifest(JkoError):
    pass


class VersionMismatch(JkoError):
    pass

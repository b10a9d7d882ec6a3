"""Exception hierarchy shared by all chronosurv modules."""


class ChronosurvError(Exception):
    """Base class for every error raised by this package."""


class InvalidConfigError(ChronosurvError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class InvalidInputError(ChronosurvError, ValueError):
    pass


class StratificationError(ChronosurvError, ValueError):
    pass


class NonFiniteInputError(InvalidInputError):
    pass


class ContractViolation(ChronosurvError, RuntimeError):
    pass


class UndefinedMetricError(ChronosurvError, ValueError):
    """A statistic has no defined value for the given data (e.g. no comparable pairs)."""


class DegenerateClusterError(ChronosurvError, ValueError):
    pass


class AbortEpochError(ChronosurvError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

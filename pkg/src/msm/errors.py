"""Exception hierarchy shared by every module."""


class MSMError(ValueError):
    """Base class for all library errors."""


class InvalidGeometry(MSMError):
    pass


class ConfigError(MSMError):
    pass


class FitFailure(MSMError):
    pass


class InvalidCount(MSMError):
    pass


class LengthMismatch(MSMError):
    pass


class Infeasible(MSMError):
    pass


class DegenerateDistributions(MSMError):
    pass


class OverlapCollapse(MSMError):
    pass


class SingularMatrix(MSMError):
    pass

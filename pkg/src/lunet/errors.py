"""Exception hierarchy shared by every module.

CLI exit codes are keyed off the two top-level families: ``DataError`` maps to
exit status 3 and ``NumericalFault`` to 4.
"""


class LunetError(Exception):
    """Base class for all package errors."""


class DataError(LunetError):
    """Input data is missing, malformed or inconsistent."""


class MalformedHeader(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class TruncatedData(DataError):
    pass


class NonBinaryMask(DataError):
    pass


class DimMismatch(DataError):
    pass


class EmptyDataset(DataError):
    pass


class IoFailure(DataError):
    pass


class MalformedRaster(DataError):
    pass


class MalformedCheckpoint(DataError):
    pass


class VersionMismatch(DataError):
    pass


class MalformedLog(DataError):
    pass


class EmptyTrainSplit(DataError):
    pass


class NonBinaryInput(DataError):
    pass


class EmptyAccumulator(DataError):
    pass


class InvalidSpec(DataError):
    """Synthetic-data specification violates its invariants."""


class ShapeMismatch(LunetError, ValueError):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class IndexOutOfRange(LunetError, IndexError):
    pass


class StaleCache(LunetError):
    """Backward called without a matching forward (or called twice)."""


class InvalidConfig(LunetError, ValueError):
    pass


class NumericalFault(LunetError, ArithmeticError):
    """A NaN/Inf appeared, or a statistic is undefined."""


class DivergedLoss(NumericalFault):
    pass

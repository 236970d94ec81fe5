"""Exception types raised by the eager (non-traced) entry points.

Inside jitted HMC trajectories failures never raise; they surface as NaN
and the proposal energy becomes +inf.
"""


class TmhmcError(Exception):
    pass


class NotPositiveDefinite(TmhmcError, ValueError):
    def __init__(self, index):
        self.index = int(index)
        super().__init__(f"non-positive pivot at index {self.index}")


class NonFinite(TmhmcError, FloatingPointError):
    pass


class DomainError(TmhmcError, ValueError):
    pass


class Unsupported(TmhmcError, NotImplementedError):
    pass


class MapFailure(TmhmcError, ValueError):
    pass


class SingularRegression(TmhmcError, ValueError):
    pass


class VarianceCollapse(TmhmcError, ValueError):
    pass


class OptimFailure(TmhmcError, RuntimeError):
    pass


class DegenerateSeries(TmhmcError, ValueError):
    pass


class DataError(TmhmcError, ValueError):
    pass


class ConfigError(TmhmcError, ValueError):
    pass

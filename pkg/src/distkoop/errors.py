"""Exception types shared across the package."""


class DistKoopError(Exception):
    """Base class for all package errors."""


class DisconnectedGraph(DistKoopError):
    pass


class IndexOutOfRange(DistKoopError):
    pass


class IntervalOutOfRange(DistKoopError):
    pass


class EmptySegment(DistKoopError):
    pass


class NonFiniteState(DistKoopError, FloatingPointError):
    """Raised when a simulation, rollout or iterate produces inf/nan."""


class SingularBlockSystem(DistKoopError):
    pass


class SolverDegenerate(DistKoopError):
    """Every sampled MPC candidate produced a non-finite cost."""


class ConfigError(DistKoopError):
    """Invalid experiment configuration.

    Carries the offending dotted field name and, when it can be located,
    the 1-based line number in the source file.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = ""
        if field is not None:
            where += f"[{field}] "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)

"""Exception types raised by the solvers and the simulator."""


class LRMCError(Exception):
    """Base class for every error raised by this package."""


class RankDeficient(LRMCError):
    """A matrix that must have full column rank does not."""


class UnderdeterminedColumn(LRMCError):
    """A masked least-squares problem has too few (or degenerate) equations."""


class UnderdeterminedAbort(LRMCError):
    """Raised under the ``fail`` policy when any column/row is underdetermined."""


class DimensionMismatch(LRMCError, ValueError):
    pass


class InvalidDimensions(LRMCError, ValueError):
    pass


class Diverged(LRMCError):
    """Iterates blew up; usually the step size is too large."""


class UnsupportedFederation(LRMCError):
    pass


class FormatError(LRMCError, ValueError):
    """Malformed binary container or config file."""

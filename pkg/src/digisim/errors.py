"""Exception types shared across the pipeline."""


class DigisimError(Exception):
    """Base class for all pipeline errors."""


# -- size-class and count-table errors ------------------------------------

class StateClassStraddlesCountyClass(DigisimError):
    """A state size class overlaps more than one county size class."""


class InconsistentBounds(DigisimError):
    """Bound refinement produced a lower bound above the upper bound."""


# -- ingest errors --------------------------------------------------------

class SchemaError(DigisimError):
    """Malformed header or field in an input file."""


class UnknownSizeClass(DigisimError):
    """A count row references a class index absent from the scheme."""


class NegativeCount(DigisimError):
    """A count is negative or violates its size-class window."""


class UnknownCell(DigisimError):
    """A gridded row references a cell id absent from the geometry."""


class BadWeek(DigisimError):
    """A week index outside 1..52."""


class NegativeValue(DigisimError):
    """A gridded layer value below zero."""


class CoordinateOutOfRange(DigisimError):
    """Latitude or longitude outside the valid range."""


# -- solver errors --------------------------------------------------------

class BigMTooSmall(DigisimError):
    """The big-M constant cannot dominate the variable range it relaxes."""


class SolveError(DigisimError):
    """The solver failed in a way the status enum cannot express."""


class Infeasible(DigisimError):
    """No assignment satisfies the constraints."""

    def __init__(self, message, group=None):
        super().__init__(message)
        self.group = group


# -- gap-filling errors ---------------------------------------------------

class NoConvergence(DigisimError):
    """Proportional fitting did not reach tolerance within the iteration cap.

    Carries the best iterate and per-marginal diagnostics so callers can
    decide whether to proceed with it.
    """

    def __init__(self, message, best=None, diagnostics=None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics


class NegativeResidual(DigisimError):
    """Known cells already exceed a row or column total."""


# -- orchestration errors --------------------------------------------------

class MissingPrerequisite(DigisimError):
    """A stage artifact required by a later stage has not been produced."""


class ConfigError(DigisimError):
    """A run configuration is malformed or references missing inputs."""


# -- farm generation / assignment errors ----------------------------------

class ConsistencyError(DigisimError):
    """Recomputed statistics disagree with solver-reported values."""


class NoCells(DigisimError):
    """A county has no grid cells carrying the requested livestock layer."""


class MissingLayer(DigisimError):
    """A required gridded layer is absent."""

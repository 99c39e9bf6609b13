"""Exception hierarchy.

Exit-code contract for the CLI: ConfigError maps to exit code 1, every
other PcnError to exit code 2.
"""


class PcnError(Exception):
    """Base class for all package errors."""


class InvalidRangeError(PcnError):
    """A numeric range argument is empty or inverted (e.g. lo >= hi)."""


class ShapeMismatchError(PcnError):
    """Two grids that must be aligned have different shapes."""


class PhaseMismatchError(PcnError):
    """A volume was routed to a model of the wrong phase or direction."""


class InsufficientDataError(PcnError):
    """Not enough cases for the requested operation (e.g. k > |cases|)."""


class EmptyRegionError(PcnError):
    """A masked region needed for a statistic contains no cells."""


class GenerationError(PcnError):
    """Phantom generation could not satisfy its constraints."""


class StageOrderError(PcnError):
    """Training stages were invoked out of order."""


class ChecksumError(PcnError):
    """A stored artifact failed checksum verification."""


class MissingArtifactError(PcnError):
    """A required file or prior pipeline output is absent."""


class LockError(PcnError):
    """The target run directory is locked by another invocation."""


class ConfigError(PcnError):
    """Configuration is invalid. Carries one message per violation."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))

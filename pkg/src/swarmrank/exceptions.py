class SwarmRankError(Exception):
    """Base class for errors raised by this package."""


class DataError(SwarmRankError):
    """Input data is unreadable, inconsistent or insufficient."""


class NumericalError(SwarmRankError):
    """A computation produced non-finite values or failed a gradient check."""


class ArtifactMismatchError(SwarmRankError):
    """A stored artifact was produced from a different corpus or config."""

"""Exception hierarchy shared by every stage of the engine."""


class EngineError(Exception):
    """Base class for user/input errors (CLI exit status 1)."""


class FormatError(EngineError):
    """A file or record does not follow its declared layout."""


class ConsistencyError(EngineError):
    """Ranks, scores or ids inside a record contradict each other."""


class DimError(EngineError):
    """Vectors of different dimensionality were mixed."""


class DupError(EngineError):
    """An identifier that must be unique occurred twice."""


class NormError(EngineError):
    """An embedding row is not unit length."""


class SizeError(EngineError):
    """Not enough data for the requested operation."""


class ArityError(EngineError):
    """Wrong number of items handed to a comparator."""


class ConfigError(EngineError):
    """Invalid or incomplete configuration."""


class SpecError(EngineError):
    """A mock oracle was asked about an item it has no score for."""

"""Exception hierarchy shared across the toolkit."""


class GeoflowError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(GeoflowError):
    """Bad or inconsistent configuration input (CLI exit code 2)."""


class GridError(GeoflowError):
    """Grid construction or field/grid compatibility violation."""


class MeshError(GeoflowError):
    """Surface mesh fails a structural invariant."""


class NumericalError(GeoflowError):
    """A solver or time stepper failed (CLI exit code 3)."""

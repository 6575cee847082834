"""Exception types shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(PipelineError):
    """Invalid rectangle geometry (empty area, negative or non-finite coordinates)."""


class ParseError(PipelineError):
    """Malformed input file or byte stream."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if field is not None:
            prefix += f"field {field}: "
        super().__init__(prefix + message)


class ConfigError(PipelineError):
    """Invalid parameter value or combination."""


class SpaceMapError(PipelineError):
    """Space map inconsistency or space lookup failure."""


class OrderingError(PipelineError):
    """Timestamps are not in the required order."""


class DetectionKindError(PipelineError):
    """Detection of the wrong kind or class for an operation."""


class StateError(PipelineError):
    """Operation called in a state that does not allow it."""


class RoutingError(PipelineError):
    """Message addressed to a node with no registered pipeline."""


class RangeError(PipelineError):
    """Two time series do not overlap in time."""

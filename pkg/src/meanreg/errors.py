"""Exception types shared across the package."""


class MeanregError(Exception):
    """Base class for all library errors."""


class GridMismatchError(MeanregError):
    """Operands live on different voxel grids."""


class ConfigError(MeanregError):
    """A configuration field failed validation; the message names the field."""


class DivergenceError(MeanregError):
    """Optimization produced a non-finite loss."""

    def __init__(self, iteration: int, level: int, message: str = ""):
        self.iteration = iteration
        self.level = level
        super().__init__(
            message or f"non-finite loss at iteration {iteration} (pyramid level {level})"
        )


class MissingTapeError(MeanregError):
    """A reverse pass was requested without the forward tape retained."""


class UndefinedMeasureError(MeanregError):
    """A metric is undefined for the given inputs (e.g. zero denominator)."""


class EmptyMaskError(MeanregError):
    """An operation that needs mask voxels received an empty mask."""


class FormatError(MeanregError):
    """A file violates the container format.

    ``field`` names the offending header field or payload section.
    """

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")

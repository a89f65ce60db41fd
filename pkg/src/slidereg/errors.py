"""Exception types shared across the registration pipeline."""


class SlideRegError(Exception):
    """Base class for all slidereg failures."""


class AllBlackError(SlideRegError):
    """Every row (or column) of the image is black at the given threshold."""


class ZeroVarianceError(SlideRegError):
    """An input signal is constant, so its correlation score is undefined."""


class InsufficientOverlapError(SlideRegError):
    """A template placement overlaps the fixed image by too few pixels."""


class NoValidPlacementError(SlideRegError):
    """No template offset satisfies the overlap constraint."""


class ShapeMismatchError(SlideRegError):
    """Image or field grids that must agree do not."""


class NonFiniteLossError(SlideRegError):
    """The objective or its gradient became non-finite (divergence)."""


class ObjectiveRegressionError(SlideRegError):
    """Optimization ended with a worse objective than it started with."""


class LandmarkParseError(SlideRegError):
    """A landmark CSV row is malformed."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class EmptyLandmarksError(SlideRegError):
    """A landmark set that must be nonempty is empty."""


class EmptyInputError(SlideRegError):
    """A statistic was requested over an empty collection."""


class InvalidSpecError(SlideRegError):
    """A synthetic-pair spec fails validation."""


class EmptyCohortError(SlideRegError):
    """An evaluation manifest yielded no usable image pairs."""


class StageError(SlideRegError):
    """Wraps a pipeline failure with the stage it occurred in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause

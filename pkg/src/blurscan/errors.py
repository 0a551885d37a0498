"""Exception types shared across the pipeline.

Every stage raises a subclass of PipelineError so the CLI can attribute a
failure to its stage and exit nonzero with a single diagnostic line.
"""


class PipelineError(Exception):
    """Base class for all pipeline failures."""


class ParameterError(PipelineError):
    """Invalid argument or configuration value."""


class FormatError(PipelineError):
    """Malformed on-disk container (bad header, truncation, size mismatch)."""

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class RenderError(PipelineError):
    """Frame rendering failure (e.g. trajectory leaves the slide)."""


class FitError(PipelineError):
    """Square-wave fit cannot proceed (degenerate motion labels)."""


class StructuralError(PipelineError):
    """Recovered scan structure disagrees with the fitted model."""


class ComposeError(PipelineError):
    """Mosaic composition failure (e.g. consecutive frames do not overlap)."""


class BalanceError(PipelineError):
    """White balance could not find a background reference block."""


class SegmentationError(PipelineError):
    """Core segmentation found no usable components."""


class LabelingError(PipelineError):
    """Label map does not match the fitted grid."""


class TrainingError(PipelineError):
    """Baseline classifier cannot be trained on the given set."""


class PredictionImportError(PipelineError):
    """External prediction CSV is invalid."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class AggregationError(PipelineError):
    """Repeat aggregation failure (e.g. zero total confidence)."""


class MetricError(PipelineError):
    """Evaluation metric undefined for the given input."""

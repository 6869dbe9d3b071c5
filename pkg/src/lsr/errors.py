"""Exception types shared across the pipeline.

Every failure the pipeline can signal deliberately derives from
``PipelineError`` so the CLI can turn it into a structured error report
and a nonzero exit code.
"""


class PipelineError(Exception):
    """Base class for all deliberate pipeline failures."""


class ConfigError(PipelineError):
    """Invalid, unknown, or out-of-range configuration."""


class ShapeError(PipelineError):
    """Array shape, dimensionality, or divisibility violation."""


class NonFiniteError(PipelineError):
    """NaN or infinity where a finite value is required."""


class DivergenceError(PipelineError):
    """Training produced a non-finite loss or gradient; the run must abort."""


class MissingDependencyError(PipelineError):
    """A required upstream artifact (checkpoint, manifest, ...) is absent."""


class DataError(PipelineError):
    """Degenerate or out-of-bounds data (zero variance, shape out of image)."""


class MetricError(PipelineError):
    """A metric's preconditions are not met (e.g. single-class AUROC)."""

"""Exception hierarchy shared by every stereoscore module."""


class StereoScoreError(Exception):
    """Base class for all data/contract errors raised by this package."""


class DimensionError(StereoScoreError, ValueError):
    """Tensor or image shapes do not agree."""


class NonFiniteError(StereoScoreError, FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(StereoScoreError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward)."""


class OptimizerStateError(StereoScoreError, RuntimeError):
    """Optimizer invoked on a parameter with no gradient."""


class ImageFormatError(StereoScoreError):
    """Base class for PPM decoding failures."""


class UnsupportedFormatError(ImageFormatError):
    pass


class MaxvalError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


class EmptyBatchError(StereoScoreError, ValueError):
    """Image too small to produce a single patch, or nothing to aggregate."""


class ManifestError(StereoScoreError):
    pass


class SplitError(StereoScoreError, ValueError):
    pass


class UndefinedCorrelationError(StereoScoreError, ArithmeticError):
    """Correlation requested on zero-variance input."""


class CheckpointError(StereoScoreError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class TrainingError(StereoScoreError, RuntimeError):
    """Training aborted (empty training set, non-finite loss)."""


class ConfigError(StereoScoreError, ValueError):
    """Invalid user-supplied configuration; surfaces as a usage error."""

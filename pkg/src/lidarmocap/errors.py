"""Exception types raised across the package."""


class LidarMocapError(Exception):
    """Base class for all package errors."""


class DegenerateRotationError(LidarMocapError):
    """6D rotation input has zero or parallel column vectors."""


class InvalidRotationError(LidarMocapError):
    """Matrix is not orthonormal within tolerance."""


class ShapeError(LidarMocapError):
    """Array shape or joint count mismatch."""


class InsufficientFramesError(LidarMocapError):
    """Operation needs more frames than the clip provides."""


class SkeletonSchemaError(LidarMocapError):
    """Skeleton is missing required joints or has an invalid hierarchy."""


class TooFewPointsError(LidarMocapError):
    """Point cloud has too few points for the requested operation."""


class EmptyCloudError(LidarMocapError):
    """Point cloud is empty."""


class SizeError(LidarMocapError):
    """Requested sample/patch size exceeds the available points."""


class ShapeRangeError(LidarMocapError):
    """Body shape parameter outside the supported range."""


class RateError(LidarMocapError):
    """Clip frame rate does not match the expected 60 fps."""


class AugmentationError(LidarMocapError):
    """Unsupported augmentation parameter."""


class TrainingDivergenceError(LidarMocapError):
    """NaN gradients or loss; the optimizer refused the step."""


class SequenceSchemaError(LidarMocapError):
    """Generator token sequence does not match the expected layout."""


class WarmUpError(LidarMocapError):
    """Stream state used before warm_start."""


class ContainerError(LidarMocapError):
    """Serialized container is invalid (version, truncation, checksum)."""

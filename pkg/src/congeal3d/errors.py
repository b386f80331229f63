"""Exception types raised by the congeal3d package."""


class CongealError(Exception):
    """Base class for all package-specific errors."""


class AngleNearPi(CongealError):
    """Rotation angle too close to pi for a stable logarithm."""


class DescriptorAbsent(CongealError):
    """A descriptor grid was requested from a field that has none."""


class EmptyField(CongealError):
    """No voxel passes the density threshold."""


class EmptyMask(CongealError):
    """A mask has no pixel above the threshold."""


class ShapeMismatch(CongealError):
    """Two arrays that must share a shape do not."""


class ZeroFeature(CongealError):
    """A feature vector norm underflowed; cosine distance is undefined."""


class MissingChannel(CongealError):
    """A rendering lacks a channel demanded by a nonzero distance weight."""


class NonFiniteGradient(CongealError):
    """An optimizer received a gradient with NaN or inf entries."""


class DegenerateConfiguration(CongealError):
    """Camera centers are collinear; similarity alignment is ill-posed."""


class NoValidPixels(CongealError):
    """A coordinate image contains no valid pixels to invert against."""


class InvalidLift(CongealError):
    """The forward 2D-to-3D lift landed on background; no canonical point."""


class EmptyKeypointList(CongealError):
    """Keypoint metrics need at least one keypoint."""


class EmptySpec(CongealError):
    """A synthetic-scene spec has no usable primitives."""


class BadMagic(CongealError):
    """Tensor file does not start with the expected magic bytes."""


class UnsupportedVersion(CongealError):
    """Tensor file version is not supported by this reader."""


class SizeMismatch(CongealError):
    """Tensor file payload does not match the size implied by its header."""


class NonFinite(CongealError):
    """Refusing to serialize NaN or inf values."""


class UnsupportedFormat(CongealError):
    """Image file is not in the expected format."""


class ConfigError(CongealError):
    """A run configuration or input file is malformed (CLI exit code 2)."""

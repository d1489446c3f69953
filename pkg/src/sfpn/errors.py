"""Exception types raised across the library."""


class SfpnError(Exception):
    """Base class for all library errors."""


class EmptyCloud(SfpnError):
    """Voxelization or profiling received zero points."""


class InvalidPoint(SfpnError):
    """A point coordinate is NaN or infinite."""

    def __init__(self, index: int):
        super().__init__(f"non-finite coordinate at point index {index}")
        self.index = index


class DuplicateCoord(SfpnError):
    """A coordinate list that must be duplicate-free contains a repeat."""


class StrideViolation(SfpnError):
    """Coordinates do not lie on the expected stride lattice."""


class MissingTargetCoords(SfpnError):
    """Transposed convolution requires an explicit target lattice."""


class InvalidKernel(SfpnError):
    """Kernel size is not valid for the requested convolution mode."""


class ShapeError(SfpnError):
    """Array shapes are inconsistent with the declared channel widths."""


class TestScaleExceeded(SfpnError):
    """Dense oracle invoked on a grid larger than the test-scale cap."""


class ConfigError(SfpnError):
    """Model configuration is invalid or names an unknown variant."""


class EmptyFrame(SfpnError):
    """Depth frame contains no valid (positive-depth) pixels."""


class RangeError(SfpnError):
    """Scalar argument outside its documented range."""


class NoMasks(SfpnError):
    """Mask set is empty; nothing to lift."""


class NormalizationError(SfpnError):
    """Feature vectors expected to be unit-norm are not."""


class InvalidBox(SfpnError):
    """Axis-aligned box has min > max on some axis."""


class EmptyBatch(SfpnError):
    """Loss evaluation received an empty frame list."""


class ZeroVector(SfpnError):
    """A feature vector that must be nonzero has (near-)zero norm."""


class NumericalError(SfpnError):
    """A numeric evaluation produced a non-finite value."""

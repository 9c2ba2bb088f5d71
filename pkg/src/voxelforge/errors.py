"""Exception types shared across the toolkit."""


class VoxelForgeError(Exception):
    """Base class for all toolkit errors."""


class EmptyCloud(VoxelForgeError):
    """A point cloud with no points was passed where points are required."""


class PointOutOfBounds(VoxelForgeError):
    """A point falls outside the grid bounds; indicates a registration failure."""


class DegenerateCloud(VoxelForgeError):
    """Subsampling would produce an empty cloud."""


class ShapeMismatch(VoxelForgeError):
    """Tensor shapes are inconsistent with the requested operation."""


class DegenerateBatch(VoxelForgeError):
    """Batch statistics are undefined (fewer than 2 samples in training mode)."""


class InvalidScore(VoxelForgeError):
    """A class score lies outside (0, 1)."""


class WrongHistoryLength(VoxelForgeError):
    """The simulator received a history of the wrong length."""


class MissingRowTag(VoxelForgeError):
    """A grid record carries no row tag and cannot be split."""


class InsufficientTriplets(VoxelForgeError):
    """Fewer than the required 9 triplet classes are present."""


class EmptyStore(VoxelForgeError):
    """A dataset store with no records was passed to training."""


class TypeMismatch(VoxelForgeError):
    """Placeholder types of two artifacts (store/checkpoint) differ."""


class MissingFile(VoxelForgeError):
    """An expected dataset file is absent."""


class MetadataParse(VoxelForgeError):
    """A dataset file name does not follow the documented convention."""


class MissingCheckpoint(VoxelForgeError):
    """A required checkpoint path was not given or does not exist."""


class ConfigError(VoxelForgeError):
    """Invalid run configuration."""


class IoError(VoxelForgeError):
    """A file could not be read or written."""

"""voxelforge: voxel occupancy-grid classification and next-deposit simulation."""

__version__ = "0.1.0"

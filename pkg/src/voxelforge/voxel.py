"""Point clouds, occupancy grids and the quantization step between them.

Coordinates are micrometres in the common scan frame. Voxels are half-open
boxes; points landing exactly on a max face are assigned to the last voxel
along that axis so that in-bounds points always map to a valid cell.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateCloud,
    EmptyCloud,
    IoError,
    PointOutOfBounds,
)

PLACEHOLDER_TYPES = ("A", "B", "C", "D", "E")

_CLOUD_MAGIC = b"VFPC"
_GRID_MAGIC = b"VFOG"


@dataclass
class PointCloud:
    """Ordered 3D points (micrometres) registered in a named frame."""

    points: np.ndarray
    frame_id: str = "scan"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class GridSpec:
    """Voxel counts plus the axis-aligned box the grid covers."""

    resolution: tuple = (32, 32, 64)
    min_corner: tuple = (0.0, 0.0, 0.0)
    max_corner: tuple = (1200.0, 2100.0, 640.0)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.min_corner = tuple(float(v) for v in self.min_corner)
        self.max_corner = tuple(float(v) for v in self.max_corner)
        if any(n < 1 for n in self.resolution):
            raise ValueError(f"resolution must be >= 1 per axis, got {self.resolution}")
        if any(hi <= lo for lo, hi in zip(self.min_corner, self.max_corner)):
            raise ValueError("max_corner must exceed min_corner on every axis")

    @property
    def cell_count(self):
        nx, ny, nz = self.resolution
        return nx * ny * nz


@dataclass
class OccupancyGrid:
    """Binary voxel volume; ``cells`` is a (nx, ny, nz) uint8 array of 0/1."""

    spec: GridSpec
    cells: np.ndarray
    class_label: int | None = None
    placeholder_type: str | None = None

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint8)
        if self.cells.shape != self.spec.resolution:
            raise ValueError(f"cells shape {self.cells.shape} != resolution {self.spec.resolution}")
        if self.placeholder_type is not None and self.placeholder_type not in PLACEHOLDER_TYPES:
            raise ValueError(f"unknown placeholder type {self.placeholder_type!r}")


def voxelize(cloud: PointCloud, spec: GridSpec) -> OccupancyGrid:
    """Quantize a cloud onto the grid: cell = 1 iff any point falls inside it."""
    pts = cloud.points
    if len(pts) == 0:
        raise EmptyCloud("cannot voxelize an empty cloud")
    if not np.all(np.isfinite(pts)):
        raise PointOutOfBounds("cloud contains non-finite coordinates")
    lo = np.array(spec.min_corner)
    hi = np.array(spec.max_corner)
    if np.any(pts < lo) or np.any(pts > hi):
        raise PointOutOfBounds(
            "point outside grid bounds (registration failure upstream?)")
    res = np.array(spec.resolution)
    idx = np.floor((pts - lo) / (hi - lo) * res).astype(np.int64)
    np.minimum(idx, res - 1, out=idx)  # max-face points go to the last voxel
    cells = np.zeros(spec.resolution, dtype=np.uint8)
    cells[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return OccupancyGrid(spec, cells)


def augment(cloud: PointCloud, count: int, keep_ratio: float = 0.8, seed: int = 0):
    """Draw ``count`` independent uniform subsamples of the cloud.

    Each subsample keeps ceil(keep_ratio * n) points, chosen without
    replacement; the whole batch is reproducible from ``seed``.
    """
    n = len(cloud)
    if n < 2:
        raise DegenerateCloud(f"augment needs at least 2 points, got {n}")
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    m = math.ceil(keep_ratio * n)
    if m == 0:
        raise DegenerateCloud("subsample size would be 0")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(int(count)):
        pick = rng.choice(n, size=m, replace=False)
        out.append(PointCloud(cloud.points[pick], frame_id=cloud.frame_id))
    return out


def grid_occupancy_count(grid: OccupancyGrid) -> int:
    """Number of occupied cells."""
    return int(grid.cells.sum())


# --- point-cloud I/O ---------------------------------------------------------

def read_cloud_text(path, frame_id="scan") -> PointCloud:
    """Line-oriented 'x y z' decimal micrometres; '#' starts a comment."""
    pts = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise IoError(f"{path}: expected 3 coordinates, got {line!r}")
                pts.append([float(v) for v in parts])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3), frame_id)


def write_cloud_text(cloud: PointCloud, path):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in cloud.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_cloud_binary(path, frame_id="scan") -> PointCloud:
    """Packed variant: magic 'VFPC', u32 count, then 3 x f64 per point (LE)."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _CLOUD_MAGIC:
                raise IoError(f"{path}: bad magic {magic!r}")
            (count,) = struct.unpack("<I", fh.read(4))
            data = np.frombuffer(fh.read(24 * count), dtype="<f8")
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if data.size != 3 * count:
        raise IoError(f"{path}: truncated cloud file")
    return PointCloud(data.reshape(count, 3).copy(), frame_id)


def write_cloud_binary(cloud: PointCloud, path):
    with open(path, "wb") as fh:
        fh.write(_CLOUD_MAGIC)
        fh.write(struct.pack("<I", len(cloud)))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())


# --- grid I/O ----------------------------------------------------------------

def write_grid(grid: OccupancyGrid, path):
    """Grid file: magic 'VFOG', u16 x3 resolution, 6 x f64 bounds, i8 class
    (-1 = unlabeled), u8 type code (0 = none, 1..5 = A..E), then the cells
    bit-packed row-major with x fastest, then y, then z."""
    nx, ny, nz = grid.spec.resolution
    label = -1 if grid.class_label is None else int(grid.class_label)
    code = 0 if grid.placeholder_type is None else PLACEHOLDER_TYPES.index(grid.placeholder_type) + 1
    bits = np.packbits(grid.cells.ravel(order="F"))
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<3H", nx, ny, nz))
        fh.write(struct.pack("<6d", *grid.spec.min_corner, *grid.spec.max_corner))
        fh.write(struct.pack("<bB", label, code))
        fh.write(bits.tobytes())


def read_grid(path) -> OccupancyGrid:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _GRID_MAGIC:
                raise IoError(f"{path}: bad magic {magic!r}")
            nx, ny, nz = struct.unpack("<3H", fh.read(6))
            bounds = struct.unpack("<6d", fh.read(48))
            label, code = struct.unpack("<bB", fh.read(2))
            nbits = nx * ny * nz
            raw = fh.read((nbits + 7) // 8)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    spec = GridSpec((nx, ny, nz), bounds[:3], bounds[3:])
    flat = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=nbits)
    cells = flat.reshape((nx, ny, nz), order="F")
    return OccupancyGrid(
        spec,
        cells,
        class_label=None if label < 0 else label,
        placeholder_type=None if code == 0 else PLACEHOLDER_TYPES[code - 1],
    )

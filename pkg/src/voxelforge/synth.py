"""Synthetic glue-deposit dataset plus an importer for real scans.

Deposits are noisy dome-shaped point clouds: an elongated ellipse footprint
for placeholder types A and B, a compact dot for C, D and E. Nine quantity
classes scale footprint and height so that glue volume strictly decreases
from class 0 to class 8; per-deposit jitter in position, eccentricity and
noise keeps the classes from being trivially separable.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError, MetadataParse, MissingFile
from .voxel import (
    GridSpec,
    OccupancyGrid,
    PLACEHOLDER_TYPES,
    PointCloud,
    augment,
    read_cloud_binary,
    read_cloud_text,
    read_grid,
    voxelize,
    write_grid,
)

# ellipse-shaped deposits vs dot-shaped ones (interpreting the A/B columns
# as the elongated footprints)
TYPE_SHAPES = {"A": "ellipse", "B": "ellipse", "C": "dot", "D": "dot", "E": "dot"}

# footprint radii (um) and dome height (um) at full glue quantity; dot
# footprints must span several voxels per axis or adjacent quantity classes
# quantize onto identical cells
_BASE_GEOMETRY = {
    "ellipse": (360.0, 640.0, 420.0),
    "dot": (270.0, 310.0, 370.0),
}

# nominal size differs per placeholder type; B, D and E carry the largest
# deposits
_TYPE_SIZE = {"A": 1.0, "B": 1.1, "C": 1.0, "D": 1.05, "E": 1.15}

DEFAULT_GRID_SPEC = GridSpec((32, 32, 64), (0.0, 0.0, 0.0), (1200.0, 2100.0, 640.0))

NUM_CLASSES = 9


def class_volume_scale(class_index: int) -> float:
    """Nominal glue volume scale; strictly decreasing, class 0 has the most."""
    if not 0 <= class_index < NUM_CLASSES:
        raise ValueError(f"class index {class_index} out of range")
    return 1.0 - 0.09 * class_index


@dataclass
class DepositSpec:
    placeholder_type: str
    class_index: int
    volume_scale: float = None
    noise_amplitude: float = 0.05
    seed: object = 0

    def __post_init__(self):
        if self.placeholder_type not in TYPE_SHAPES:
            raise ValueError(f"unknown placeholder type {self.placeholder_type!r}")
        if self.volume_scale is None:
            self.volume_scale = class_volume_scale(self.class_index)

    @property
    def shape(self):
        return TYPE_SHAPES[self.placeholder_type]


@dataclass
class DatasetManifest:
    circuits: int = 27
    triplets: int = 9
    placeholders_per_type: int = 4
    rows: int = 4
    augmentation_count: int = 100
    keep_ratio: float = 0.8
    noise_amplitude: float = 0.05
    test_row: int = 3

    def __post_init__(self):
        if self.circuits != 3 * self.triplets:
            raise ValueError("circuits must be 3 per triplet")
        if self.placeholders_per_type != self.rows:
            raise ValueError("one placeholder per row per type")


def gen_deposit(spec: DepositSpec, grid_spec: GridSpec = DEFAULT_GRID_SPEC) -> PointCloud:
    """Sample a noisy dome of surface points for one deposit; deterministic
    per seed."""
    rng = np.random.default_rng(spec.seed)
    lo = np.array(grid_spec.min_corner)
    hi = np.array(grid_spec.max_corner)
    cx = 0.5 * (lo[0] + hi[0]) + rng.uniform(-45.0, 45.0)
    cy = 0.5 * (lo[1] + hi[1]) + rng.uniform(-80.0, 80.0)

    rx0, ry0, h0 = (v * _TYPE_SIZE[spec.placeholder_type]
                    for v in _BASE_GEOMETRY[spec.shape])
    s = spec.volume_scale
    rx = rx0 * s ** 0.45 * rng.uniform(0.96, 1.04)
    ry = ry0 * s ** 0.45 * rng.uniform(0.96, 1.04)
    h = h0 * s ** 0.55 * rng.uniform(0.97, 1.03)

    n = int(rng.integers(2200, 2800))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    rad = np.sqrt(rng.uniform(0.0, 1.0, n))
    x = cx + rx * rad * np.cos(theta)
    y = cy + ry * rad * np.sin(theta)
    z = h * (1.0 - rad ** 2) ** 0.85
    z = z + spec.noise_amplitude * h * rng.standard_normal(n)

    eps = 1e-9
    x = np.clip(x, lo[0], hi[0] - eps)
    y = np.clip(y, lo[1], hi[1] - eps)
    z = np.clip(z, lo[2], hi[2] - eps)
    return PointCloud(np.column_stack([x, y, z]))


@dataclass
class GridRecord:
    packed: np.ndarray
    class_index: int
    placeholder_type: str
    circuit: int
    row: int
    aug: int


class GridStore:
    """In-memory labeled grid collection; cells kept bit-packed."""

    def __init__(self, spec: GridSpec, manifest: DatasetManifest = None, seed: int = 0):
        self.spec = spec
        self.manifest = manifest
        self.seed = seed
        self.records: list[GridRecord] = []

    def __len__(self):
        return len(self.records)

    def append_cells(self, cells, class_index, placeholder_type, circuit, row, aug):
        packed = np.packbits(np.asarray(cells, dtype=np.uint8).ravel(order="F"))
        self.records.append(GridRecord(packed, class_index, placeholder_type, circuit, row, aug))

    def cells(self, i):
        nx, ny, nz = self.spec.resolution
        flat = np.unpackbits(self.records[i].packed, count=nx * ny * nz)
        return flat.reshape((nx, ny, nz), order="F")

    def grid(self, i) -> OccupancyGrid:
        r = self.records[i]
        return OccupancyGrid(self.spec, self.cells(i), class_label=r.class_index,
                             placeholder_type=r.placeholder_type)

    def dense_batch(self, indices, dtype=np.float64):
        """Unpack records into a (B, 1, nx, ny, nz) float batch."""
        nx, ny, nz = self.spec.resolution
        out = np.empty((len(indices), 1, nx, ny, nz), dtype=dtype)
        for j, i in enumerate(indices):
            out[j, 0] = self.cells(i)
        return out

    def labels(self):
        return np.array([r.class_index for r in self.records], dtype=np.int64)

    def types(self):
        return sorted({r.placeholder_type for r in self.records})

    def subset(self, indices):
        sub = GridStore(self.spec, self.manifest, self.seed)
        sub.records = [self.records[i] for i in indices]
        return sub

    def filter_type(self, placeholder_type):
        return self.subset([i for i, r in enumerate(self.records)
                            if r.placeholder_type == placeholder_type])

    def counts_by_type(self):
        counts = {}
        for r in self.records:
            counts[r.placeholder_type] = counts.get(r.placeholder_type, 0) + 1
        return counts

    def counts_by_class(self, placeholder_type=None):
        counts = [0] * NUM_CLASSES
        for r in self.records:
            if placeholder_type is None or r.placeholder_type == placeholder_type:
                counts[r.class_index] += 1
        return counts

    # --- persistence -----------------------------------------------------

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(self.records):
            name = f"t{r.placeholder_type}_c{r.circuit:02d}_p{r.row}_a{r.aug:03d}.vfog"
            write_grid(self.grid(i), root / name)
        lines = [
            f"seed={self.seed}",
            f"grids={len(self.records)}",
            "split_rule=test_row",
        ]
        if self.manifest is not None:
            m = self.manifest
            lines += [
                f"circuits={m.circuits}",
                f"triplets={m.triplets}",
                f"rows={m.rows}",
                f"augmentation_count={m.augmentation_count}",
                f"keep_ratio={m.keep_ratio}",
                f"noise_amplitude={m.noise_amplitude}",
                f"test_row={m.test_row}",
            ]
        for t, c in sorted(self.counts_by_type().items()):
            lines.append(f"count_{t}={c}")
        (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, root):
        root = Path(root)
        files = sorted(root.glob("*.vfog"))
        if not files:
            raise MissingFile(f"no grid files under {root}")
        manifest = None
        seed = 0
        mf = root / "manifest.txt"
        if mf.exists():
            kv = parse_keyvalue(mf.read_text(encoding="utf-8"))
            seed = int(kv.get("seed", 0))
            if "circuits" in kv:
                manifest = DatasetManifest(
                    circuits=int(kv["circuits"]),
                    triplets=int(kv["triplets"]),
                    placeholders_per_type=int(kv["rows"]),
                    rows=int(kv["rows"]),
                    augmentation_count=int(kv["augmentation_count"]),
                    keep_ratio=float(kv["keep_ratio"]),
                    noise_amplitude=float(kv["noise_amplitude"]),
                    test_row=int(kv["test_row"]),
                )
        pat = re.compile(r"^t([A-E])_c(\d+)_p(\d)_a(\d+)\.vfog$")
        store = None
        for path in files:
            m = pat.match(path.name)
            if not m:
                raise MetadataParse(f"grid file name {path.name!r} does not match convention")
            grid = read_grid(path)
            if store is None:
                store = cls(grid.spec, manifest, seed)
            store.records.append(GridRecord(
                np.packbits(grid.cells.ravel(order="F")),
                grid.class_label, m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))))
        return store


def parse_keyvalue(text):
    """Line-oriented key=value with '#' comments."""
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise MetadataParse(f"bad key=value line: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def gen_dataset(manifest: DatasetManifest, seed: int, types=PLACEHOLDER_TYPES,
                grid_spec: GridSpec = DEFAULT_GRID_SPEC) -> GridStore:
    """Generate the full labeled store: per type, 9 classes x 12 deposits x
    augmentation_count grids, each tagged with class, type, circuit and row.

    Per-deposit RNG streams derive from (seed, type, circuit, row) so the
    result is independent of generation order.
    """
    store = GridStore(grid_spec, manifest, seed)
    for t in types:
        t_idx = PLACEHOLDER_TYPES.index(t)
        for circuit in range(manifest.circuits):
            cls = circuit // 3
            for row in range(1, manifest.rows + 1):
                ss = np.random.SeedSequence(entropy=(seed, t_idx, circuit, row))
                dep_seed, aug_seed = ss.spawn(2)
                spec = DepositSpec(t, cls, noise_amplitude=manifest.noise_amplitude,
                                   seed=dep_seed)
                cloud = gen_deposit(spec, grid_spec)
                subs = augment(cloud, manifest.augmentation_count,
                               keep_ratio=manifest.keep_ratio, seed=aug_seed)
                for a, sub in enumerate(subs):
                    store.append_cells(voxelize(sub, grid_spec).cells, cls, t, circuit, row, a)
    return store


_REAL_NAME = re.compile(r"^c(\d{2})_([A-E])_r([1-4])\.(xyz|vfpc)$")


def import_real(root, manifest: DatasetManifest = None,
                grid_spec: GridSpec = DEFAULT_GRID_SPEC, seed: int = 0) -> GridStore:
    """Import real scans laid out as cNN_T_rR.xyz (text) or .vfpc (binary),
    circuits numbered c00..c26; applies the same augmentation as gen_dataset.

    Fails loudly when a placeholder file is missing for any type present.
    """
    manifest = manifest or DatasetManifest()
    root = Path(root)
    if not root.is_dir():
        raise MissingFile(f"{root} is not a directory")
    found = {}
    for path in sorted(root.iterdir()):
        if path.is_dir():
            continue
        m = _REAL_NAME.match(path.name)
        if not m:
            raise MetadataParse(f"file name {path.name!r} does not match cNN_T_rR.(xyz|vfpc)")
        circuit, t, row = int(m.group(1)), m.group(2), int(m.group(3))
        found[(t, circuit, row)] = path
    if not found:
        raise MissingFile(f"no point-cloud files under {root}")
    types = sorted({t for t, _, _ in found})
    store = GridStore(grid_spec, manifest, seed)
    for t in types:
        for circuit in range(manifest.circuits):
            for row in range(1, manifest.rows + 1):
                key = (t, circuit, row)
                if key not in found:
                    raise MissingFile(f"missing placeholder c{circuit:02d}_{t}_r{row}")
                path = found[key]
                cloud = (read_cloud_binary(path) if path.suffix == ".vfpc"
                         else read_cloud_text(path))
                cls = circuit // 3
                ss = np.random.SeedSequence(entropy=(seed, PLACEHOLDER_TYPES.index(t),
                                                     circuit, row))
                (aug_seed,) = ss.spawn(1)
                subs = augment(cloud, manifest.augmentation_count,
                               keep_ratio=manifest.keep_ratio, seed=aug_seed)
                for a, sub in enumerate(subs):
                    store.append_cells(voxelize(sub, grid_spec).cells, cls, t, circuit, row, a)
    return store

"""Voxel annotation: which streamline bundles pass through each mask voxel.

Coordinates are continuous voxel space. A point ``(x, y, z)`` belongs to the
lattice cell ``(floor(x), floor(y), floor(z))``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

N_BUNDLES = 6
RASTER_STEP = 0.25


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple
    mask: np.ndarray  # bool, shape == dims, indexed [i, j, k]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidInputError(f"dims must be 3 positive integers, got {self.dims}")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.size != int(np.prod(dims)):
            raise InvalidInputError(
                f"mask has {mask.size} cells, dims {dims} need {int(np.prod(dims))}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "mask", mask.reshape(dims))

    @classmethod
    def full(cls, dims):
        return cls(dims, np.ones(dims, dtype=bool))

    @property
    def n_voxels(self):
        return int(self.mask.sum())

    def mask_voxels(self):
        """In-mask voxel coordinates, shape (N, 3), sorted by (k, j, i)."""
        k, j, i = np.nonzero(self.mask.transpose(2, 1, 0))
        return np.stack([i, j, k], axis=1).astype(np.int64)

    def in_bounds(self, cells):
        cells = np.asarray(cells)
        return np.all((cells >= 0) & (cells < np.asarray(self.dims)), axis=-1)


@dataclass
class StreamlineBundle:
    cluster_id: int
    streamlines: list  # of (M, 3) float arrays

    def __post_init__(self):
        lines = []
        for line in self.streamlines:
            arr = np.asarray(line, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) == 0:
                raise InvalidInputError(
                    f"bundle {self.cluster_id}: polylines must be non-empty (M, 3) arrays")
            lines.append(arr)
        self.streamlines = lines

    @property
    def n_points(self):
        return sum(len(s) for s in self.streamlines)


@dataclass
class FeatureTable:
    voxels: np.ndarray       # (N, 3) int
    features: np.ndarray     # (N, 6) uint8, entries in {0, 1}
    point_count: np.ndarray  # (N,) int

    def __len__(self):
        return len(self.voxels)

    def __eq__(self, other):
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return (np.array_equal(self.voxels, other.voxels)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.point_count, other.point_count))


@dataclass
class LabelMap:
    voxels: np.ndarray  # (N, 3) int
    labels: np.ndarray  # (N,) int in 1..n_labels
    n_labels: int

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.voxels):
            raise InvalidInputError("labels and voxels differ in length")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > self.n_labels):
            raise InvalidInputError(f"labels must lie in 1..{self.n_labels}")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (self.n_labels == other.n_labels
                and np.array_equal(self.voxels, other.voxels)
                and np.array_equal(self.labels, other.labels))


def _sample_polyline(points, step):
    """Supersample every segment at spacing <= step; returns (S, 3) samples."""
    if len(points) == 1:
        return points
    seg = np.diff(points, axis=0)
    n = np.maximum(1, np.ceil(np.linalg.norm(seg, axis=1) / step)).astype(np.int64)
    starts = np.repeat(points[:-1], n, axis=0)
    steps = np.repeat(seg / n[:, None], n, axis=0)
    offsets = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    return np.vstack([starts + steps * offsets[:, None], points[-1:]])


def _visited_cells(points, grid, step):
    cells = np.floor(_sample_polyline(points, step)).astype(np.int64)
    return np.unique(cells[grid.in_bounds(cells)], axis=0)


def rasterize_polyline(polyline, grid, step=RASTER_STEP):
    """Set of in-bounds lattice cells visited by ``polyline``."""
    points = np.asarray(polyline, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise InvalidInputError("empty polyline")
    return {tuple(int(c) for c in cell) for cell in _visited_cells(points, grid, step)}


def _check_bundles(bundles):
    ids = sorted(b.cluster_id for b in bundles)
    if ids != list(range(1, N_BUNDLES + 1)):
        raise InvalidInputError(
            f"expected exactly {N_BUNDLES} bundles with ids 1..{N_BUNDLES}, got {ids}")
    return sorted(bundles, key=lambda b: b.cluster_id)


def annotate(bundles, grid, step=RASTER_STEP):
    """Binary bundle-intersection features and raw point counts per mask voxel."""
    bundles = _check_bundles(bundles)
    if grid.n_voxels == 0:
        raise InvalidInputError("mask has no voxels")
    hit = np.zeros((N_BUNDLES,) + grid.dims, dtype=bool)
    counts = np.zeros(grid.dims, dtype=np.int64)
    for b, bundle in enumerate(bundles):
        for line in bundle.streamlines:
            cells = _visited_cells(line, grid, step)
            hit[b, cells[:, 0], cells[:, 1], cells[:, 2]] = True
            vertices = np.floor(line).astype(np.int64)
            vertices = vertices[grid.in_bounds(vertices)]
            np.add.at(counts, (vertices[:, 0], vertices[:, 1], vertices[:, 2]), 1)
    voxels = grid.mask_voxels()
    i, j, k = voxels.T
    features = hit[:, i, j, k].T.astype(np.uint8)
    return FeatureTable(voxels, features, counts[i, j, k])

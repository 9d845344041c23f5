"""Synthetic multi-subject cohorts: ellipsoidal mask, block parcels, six bundles.

Parcel 1 is a cap of the ellipsoid along ``split_axes[0]`` that no bundle
targets. The remaining region is cut into equal blocks along ``split_axes[1]``
(parcels 2..P). Every bundle is a sheaf of straight streamlines running along
the third axis through the blocks it targets, so each bundled parcel carries a
distinct bundle signature. Subjects differ by a rigid translation (applied to
parcels and streamlines alike), streamline dropout and per-point noise.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import io
from .annotation import N_BUNDLES, LabelMap, StreamlineBundle, VoxelGrid
from .errors import InvalidSpecError


@dataclass
class CohortSpec:
    dims: tuple = (24, 24, 24)
    center: tuple = None
    semi_axes: tuple = (8.0, 6.5, 5.5)
    true_parcel_count: int = 3
    split_axes: tuple = (0, 1)
    first_split: float = -1.0 / 3.0
    bundle_targets: tuple = None
    streamline_spacing: float = 0.5
    point_spacing: float = 1.0
    jitter: float = 1.0
    dropout: float = 0.1
    point_noise: float = 0.2
    subjects: int = 12
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if self.center is None:
            self.center = tuple(d / 2.0 for d in self.dims)
        self.center = tuple(float(c) for c in self.center)
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        self.split_axes = tuple(int(a) for a in self.split_axes)
        if self.bundle_targets is None:
            n = self.true_parcel_count - 1
            self.bundle_targets = tuple((2 + b % n,) for b in range(N_BUNDLES)) if n > 0 else ()
        self.bundle_targets = tuple(tuple(int(p) for p in t) for t in self.bundle_targets)
        self._validate()

    def _validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidSpecError("dims must be 3 positive integers")
        if min(self.semi_axes) <= 0:
            raise InvalidSpecError("semi-axes must be positive")
        if self.true_parcel_count < 2:
            raise InvalidSpecError("need at least 2 true parcels")
        if len(set(self.split_axes)) != 2 or not set(self.split_axes) <= {0, 1, 2}:
            raise InvalidSpecError("split_axes must be two distinct axes")
        if not -1.0 < self.first_split < 1.0:
            raise InvalidSpecError("first_split must lie strictly inside (-1, 1)")
        if len(self.bundle_targets) != N_BUNDLES:
            raise InvalidSpecError(f"need targets for exactly {N_BUNDLES} bundles")
        bundled = range(2, self.true_parcel_count + 1)
        for targets in self.bundle_targets:
            if not set(targets) <= set(bundled):
                raise InvalidSpecError("bundles may only target parcels 2..P (parcel 1 is unbundled)")
        signatures = [frozenset(b for b, t in enumerate(self.bundle_targets) if p in t) for p in bundled]
        if any(not s for s in signatures) or len(set(signatures)) != len(signatures):
            raise InvalidSpecError("every bundled parcel needs a distinct non-empty bundle subset")
        if not 0 <= self.dropout < 1 or self.jitter < 0 or self.point_noise < 0:
            raise InvalidSpecError("noise parameters out of range")
        if self.streamline_spacing <= 0 or self.point_spacing <= 0:
            raise InvalidSpecError("spacings must be positive")
        if self.subjects < 0:
            raise InvalidSpecError("subjects must be >= 0")

    def to_dict(self):
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    @property
    def line_axis(self):
        return ({0, 1, 2} - set(self.split_axes)).pop()

    def boundaries(self):
        """Integer split planes: the parcel-1 plane and the block planes."""
        a0, a1 = self.split_axes
        first = self.center[a0] + round(self.first_split * self.semi_axes[a0])
        n = self.true_parcel_count - 1
        blocks = [self.center[a1] + round(-self.semi_axes[a1] + 2 * self.semi_axes[a1] * m / n)
                  for m in range(1, n)]
        return first, blocks

    def parcel_of(self, points, shift=(0.0, 0.0, 0.0)):
        """True parcel (1..P) of continuous points under a rigid shift."""
        p = np.asarray(points, dtype=np.float64) - np.asarray(shift)
        a0, a1 = self.split_axes
        first, blocks = self.boundaries()
        label = 2 + np.searchsorted(np.asarray(blocks, dtype=np.float64), p[..., a1], side="right")
        return np.where(p[..., a0] < first, 1, label)


class Subject(NamedTuple):
    index: int
    grid: VoxelGrid
    bundles: list
    truth: LabelMap


def ellipsoid_mask(spec):
    idx = np.indices(spec.dims).reshape(3, -1).T + 0.5
    r = ((idx - np.asarray(spec.center)) / np.asarray(spec.semi_axes)) ** 2
    return VoxelGrid(spec.dims, (r.sum(axis=1) <= 1.0).reshape(spec.dims))


def bundle_templates(spec):
    """Noise-free streamlines per bundle, as a list of 6 lists of (M, 3) arrays."""
    a0, a1 = spec.split_axes
    a2 = spec.line_axis
    s = spec.streamline_spacing
    u = np.arange(s / 2.0, spec.dims[a0], s)
    v = np.arange(s / 2.0, spec.dims[a1], s)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    uu, vv = uu.ravel(), vv.ravel()
    r0, r1 = spec.semi_axes[a0] + 1.0, spec.semi_axes[a1] + 1.0
    inside = ((uu - spec.center[a0]) / r0) ** 2 + ((vv - spec.center[a1]) / r1) ** 2 <= 1.0
    uu, vv = uu[inside], vv[inside]
    probe = np.zeros((len(uu), 3))
    probe[:, a0], probe[:, a1], probe[:, a2] = uu, vv, spec.center[a2]
    parcel = spec.parcel_of(probe)
    depth = np.arange(-0.5, spec.dims[a2] + 0.5 + 1e-9, spec.point_spacing)

    out = []
    for b, targets in enumerate(spec.bundle_targets):
        # small per-bundle offset keeps bundles geometrically distinct
        nudge = 0.01 * (b + 1) * s
        lines = []
        for i in np.flatnonzero(np.isin(parcel, targets)):
            pts = np.empty((len(depth), 3))
            pts[:, a0] = uu[i] + nudge
            pts[:, a1] = vv[i] - nudge
            pts[:, a2] = depth
            lines.append(pts)
        out.append(lines)
    return out


def check_geometry(spec, grid):
    """Every true parcel must own at least one mask voxel at zero shift."""
    if grid.n_voxels == 0:
        raise InvalidSpecError("ellipsoid mask is empty")
    present = np.unique(spec.parcel_of(grid.mask_voxels() + 0.5))
    missing = sorted(set(range(1, spec.true_parcel_count + 1)) - set(present.tolist()))
    if missing:
        raise InvalidSpecError(f"parcels {missing} do not intersect the mask")


def generate_subject(spec, subject_index, templates=None, grid=None):
    """Grid, six bundles and truth labels for one subject; seeded by (seed, index)."""
    if grid is None:
        grid = ellipsoid_mask(spec)
        check_geometry(spec, grid)
    templates = templates or bundle_templates(spec)
    rng = np.random.default_rng([spec.seed, subject_index])

    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    shift = direction * rng.uniform(0.0, spec.jitter)

    bundles = []
    for b, lines in enumerate(templates):
        keep = rng.uniform(size=len(lines)) >= spec.dropout
        noisy = []
        for line, kept in zip(lines, keep):
            if not kept:
                continue
            jitter = rng.normal(0.0, spec.point_noise, size=line.shape) if spec.point_noise > 0 else 0.0
            noisy.append(line + shift + jitter)
        bundles.append(StreamlineBundle(b + 1, noisy))

    voxels = grid.mask_voxels()
    labels = LabelMap(voxels, spec.parcel_of(voxels + 0.5, shift), spec.true_parcel_count)
    return Subject(subject_index, grid, bundles, labels)


def generate_cohort(spec):
    grid = ellipsoid_mask(spec)
    check_geometry(spec, grid)
    templates = bundle_templates(spec)
    return [generate_subject(spec, i, templates, grid) for i in range(1, spec.subjects + 1)]


def subject_dir(index):
    return f"sub-{index:02d}"


def write_cohort(spec, out_dir, subjects=None):
    """Write every subject plus ``manifest.json``; returns the manifest dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = generate_cohort(spec) if subjects is None else subjects
    entries = []
    for subj in subjects:
        d = out / subject_dir(subj.index)
        d.mkdir(exist_ok=True)
        io.write_mask(d / "mask.json", subj.grid)
        io.write_streamlines(d / "streamlines.ndjson", subj.bundles)
        io.write_label_map(d / "truth.tsv", subj.truth)
        entries.append({
            "id": subject_dir(subj.index),
            "mask": f"{subject_dir(subj.index)}/mask.json",
            "streamlines": f"{subject_dir(subj.index)}/streamlines.ndjson",
            "truth": f"{subject_dir(subj.index)}/truth.tsv",
        })
    manifest = {"spec": spec.to_dict(), "subjects": entries}
    io.write_json(out / "manifest.json", manifest)
    return manifest

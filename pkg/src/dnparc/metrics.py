"""Parcellation quality and cross-subject consistency metrics."""

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidInputError, UndefinedMetricError

log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    method: str
    K: int
    S: float
    dice_per_parcel: list
    dice_mean: float
    adjusted_rand: float = None
    subjects: list = field(default_factory=list)
    seed: int = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def silhouette(points, labels):
    """Mean silhouette (b - a) / max(a, b) under the Euclidean metric.

    Points in singleton clusters contribute 0, as do points with a == b == 0.
    """
    X = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) != len(labels):
        raise InvalidInputError("points must be (N, d) with one label per point")
    if len(X) < 2:
        raise InvalidInputError("silhouette needs at least 2 points")
    ids, inv, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    if len(ids) < 2:
        raise UndefinedMetricError("silhouette is undefined for a single cluster")
    D = cdist(X, X)
    onehot = np.zeros((len(X), len(ids)))
    onehot[np.arange(len(X)), inv] = 1.0
    sums = D @ onehot
    own = sizes[inv]
    a = sums[np.arange(len(X)), inv] / np.maximum(own - 1, 1)
    mean_other = sums / sizes[None, :]
    mean_other[np.arange(len(X)), inv] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def _voxel_keys(voxels):
    v = np.asarray(voxels, dtype=np.int64)
    return (v[:, 2] << 42) | (v[:, 1] << 21) | v[:, 0]


def dice_pair(map_a, map_b, k):
    """2 |A & B| / (|A| + |B|) for the voxel sets labelled ``k`` in each map."""
    K = max(map_a.n_labels, map_b.n_labels)
    if not 1 <= k <= K:
        raise InvalidInputError(f"parcel {k} outside 1..{K}")
    A = _voxel_keys(map_a.voxels[map_a.labels == k])
    B = _voxel_keys(map_b.voxels[map_b.labels == k])
    if len(A) == 0 and len(B) == 0:
        log.debug("parcel %d empty in both maps; Dice taken as 1", k)
        return 1.0
    if len(A) == 0 or len(B) == 0:
        log.debug("parcel %d empty in one map; Dice taken as 0", k)
        return 0.0
    common = len(np.intersect1d(A, B, assume_unique=True))
    return 2.0 * common / (len(A) + len(B))


def dice_summary(maps, K):
    """Per-parcel Dice averaged over all unordered subject pairs, and their mean."""
    maps = list(maps)
    if len(maps) < 2:
        raise InvalidInputError("dice_summary needs at least 2 label maps")
    pairs = list(itertools.combinations(range(len(maps)), 2))
    per = [float(np.mean([dice_pair(maps[i], maps[j], k) for i, j in pairs]))
           for k in range(1, K + 1)]
    return per, float(np.mean(per))


def select_k(dice_means):
    """K with the highest mean Dice; ties go to the smaller K."""
    if not dice_means:
        raise InvalidInputError("no candidate K values")
    best = max(dice_means.values())
    return min(k for k, v in dice_means.items() if v == best)


def adjusted_rand(labels, truth):
    """Adjusted Rand index from the contingency table."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    if labels.shape != truth.shape or labels.ndim != 1:
        raise InvalidInputError("label vectors must have equal length")
    n = len(labels)
    if n < 2:
        return 1.0
    _, a = np.unique(labels, return_inverse=True)
    _, b = np.unique(truth, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)

    def pairs(m):
        m = np.asarray(m, dtype=np.float64)
        return float(np.sum(m * (m - 1) / 2.0))

    index = pairs(table)
    rows = pairs(table.sum(axis=1))
    cols = pairs(table.sum(axis=0))
    expected = rows * cols / (n * (n - 1) / 2.0)
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return (index - expected) / (top - expected)


def aligned_labels(label_map, voxels):
    """Labels of ``label_map`` reordered to follow ``voxels``."""
    keys = _voxel_keys(label_map.voxels)
    order = np.argsort(keys)
    want = _voxel_keys(voxels)
    pos = np.searchsorted(keys[order], want)
    if np.any(pos >= len(keys)) or np.any(keys[order][np.minimum(pos, len(keys) - 1)] != want):
        raise InvalidInputError("label map does not cover the requested voxels")
    return label_map.labels[order][pos]


def subject_silhouette(features, label_map):
    """Silhouette of one subject's parcels on its raw binary feature vectors."""
    labels = aligned_labels(label_map, features.voxels)
    return silhouette(features.features.astype(np.float64), labels)


def evaluate(method, maps, features, K, truths=None, subjects=None, seed=None, config=None):
    """MetricsReport over a set of subjects' label maps."""
    scores = []
    for table, lm in zip(features, maps):
        try:
            scores.append(subject_silhouette(table, lm))
        except UndefinedMetricError:
            log.warning("single-parcel map; silhouette skipped for one subject")
    per, mean = dice_summary(maps, K)
    ari = None
    if truths is not None:
        ari = float(np.mean([adjusted_rand(aligned_labels(lm, t.voxels), t.labels)
                             for lm, t in zip(maps, truths)]))
    return MetricsReport(method=method, K=K, S=float(np.mean(scores)) if scores else None,
                         dice_per_parcel=per, dice_mean=mean, adjusted_rand=ari,
                         subjects=list(subjects or []), seed=seed, config=dict(config or {}))

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dnparc.annotation import FeatureTable, LabelMap, VoxelGrid  # noqa: E402


def blob_table(n_per=40, seed=0, patterns=None, flagged=10):
    """FeatureTable with well separated binary patterns plus low-connectivity voxels.

    Pattern voxels get point_count 5; the ``flagged`` extra voxels have all-zero
    features and point_count 0 or 1. Returns (table, blob id per voxel, 0 = flagged).
    """
    rng = np.random.default_rng(seed)
    patterns = patterns or [(1, 1, 0, 0, 0, 0), (0, 0, 1, 1, 0, 0), (0, 0, 0, 0, 1, 1)]
    feats, counts, blob = [], [], []
    for b, p in enumerate(patterns, 1):
        feats += [p] * n_per
        counts += [5] * n_per
        blob += [b] * n_per
    feats += [(0,) * 6] * flagged
    counts += list(rng.integers(0, 2, size=flagged))
    blob += [0] * flagged
    n = len(feats)
    side = int(np.ceil(n ** (1 / 3))) + 1
    grid_idx = np.stack(np.unravel_index(np.arange(n), (side, side, side)), axis=1)
    table = FeatureTable(grid_idx.astype(np.int64), np.array(feats, dtype=np.uint8),
                         np.array(counts, dtype=np.int64))
    return table, np.array(blob)


@pytest.fixture
def blobs():
    return blob_table()


@pytest.fixture
def small_grid():
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:4, 1:4, 1:4] = True
    return VoxelGrid((5, 5, 5), mask)


def label_map_for(grid, labels, n_labels=None):
    labels = np.asarray(labels)
    return LabelMap(grid.mask_voxels(), labels, n_labels or int(labels.max()))

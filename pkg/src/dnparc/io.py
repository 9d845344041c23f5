"""Readers and writers for the on-disk formats.

* streamlines: NDJSON, one ``{"cluster": int, "points": [[x, y, z], ...]}`` per line
* mask: JSON header ``{"dims": [nx, ny, nz], "data": "<raw file>"}`` plus raw 0/1 bytes,
  x-fastest order
* feature table / label map: TSV with a header row, rows sorted by (k, j, i)
* checkpoints: JSON, floats written with 17 significant digits
"""

import json
import math
from pathlib import Path

import numpy as np

from .annotation import N_BUNDLES, FeatureTable, LabelMap, StreamlineBundle, VoxelGrid
from .errors import InvalidInputError

FEATURE_COLUMNS = ["i", "j", "k"] + [f"x{b}" for b in range(1, N_BUNDLES + 1)] + ["point_count"]
LABEL_COLUMNS = ["i", "j", "k", "label"]


def _sort_kji(voxels):
    voxels = np.asarray(voxels)
    return np.lexsort((voxels[:, 0], voxels[:, 1], voxels[:, 2]))


# -- streamlines --------------------------------------------------------------

def write_streamlines(path, bundles):
    with open(path, "w") as fh:
        for bundle in sorted(bundles, key=lambda b: b.cluster_id):
            for line in bundle.streamlines:
                rec = {"cluster": int(bundle.cluster_id),
                       "points": [[float(v) for v in p] for p in line]}
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_streamlines(path):
    lines = {c: [] for c in range(1, N_BUNDLES + 1)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
                cluster = int(rec["cluster"])
                points = rec["points"]
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad streamline record ({exc})")
            if cluster not in lines:
                raise InvalidInputError(f"{path}:{lineno}: cluster {cluster} outside 1..{N_BUNDLES}")
            lines[cluster].append(points)
    return [StreamlineBundle(c, s) for c, s in lines.items()]


# -- mask ---------------------------------------------------------------------

def write_mask(path, grid):
    path = Path(path)
    raw = path.with_suffix(".raw")
    raw.write_bytes(grid.mask.astype(np.uint8).ravel(order="F").tobytes())
    path.write_text(json.dumps({"dims": list(grid.dims), "data": raw.name}) + "\n")


def read_mask(path):
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        dims = tuple(int(d) for d in header["dims"])
    except (ValueError, KeyError, TypeError) as exc:
        raise InvalidInputError(f"{path}: bad mask header ({exc})")
    raw = path.parent / header.get("data", path.with_suffix(".raw").name)
    data = np.frombuffer(raw.read_bytes(), dtype=np.uint8)
    if data.size != int(np.prod(dims)) or np.any(data > 1):
        raise InvalidInputError(f"{raw}: expected {int(np.prod(dims))} bytes of 0/1")
    return VoxelGrid(dims, data.reshape(dims, order="F").astype(bool))


# -- tables -------------------------------------------------------------------

def _read_tsv(path, columns):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != columns:
            raise InvalidInputError(f"{path}: expected columns {columns}, got {header}")
        rows = [line.split("\t") for line in fh if line.strip()]
    try:
        return np.array(rows, dtype=np.int64).reshape(-1, len(columns))
    except ValueError as exc:
        raise InvalidInputError(f"{path}: non-integer entry ({exc})")


def _write_tsv(path, columns, data):
    data = np.asarray(data, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write("\t".join(columns) + "\n")
        for row in data:
            fh.write("\t".join(str(int(v)) for v in row) + "\n")


def write_feature_table(path, table):
    order = _sort_kji(table.voxels)
    data = np.column_stack([table.voxels, table.features, table.point_count])[order]
    _write_tsv(path, FEATURE_COLUMNS, data)


def read_feature_table(path):
    data = _read_tsv(path, FEATURE_COLUMNS)
    features = data[:, 3:3 + N_BUNDLES]
    if np.any((features != 0) & (features != 1)) or np.any(data[:, -1] < 0):
        raise InvalidInputError(f"{path}: features must be 0/1 and point counts >= 0")
    return FeatureTable(data[:, :3], features.astype(np.uint8), data[:, -1])


def write_label_map(path, label_map):
    order = _sort_kji(label_map.voxels)
    data = np.column_stack([label_map.voxels, label_map.labels])[order]
    _write_tsv(path, LABEL_COLUMNS, data)


def read_label_map(path, n_labels=None):
    data = _read_tsv(path, LABEL_COLUMNS)
    if n_labels is None:
        n_labels = int(data[:, 3].max()) if len(data) else 1
    return LabelMap(data[:, :3], data[:, 3], n_labels)


# -- JSON with fixed float formatting ------------------------------------------

def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            raise InvalidInputError("non-finite value in checkpoint")
        text = format(x, ".17g")
        return text if any(c in text for c in ".e") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (list, tuple, dict, np.ndarray)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps_canonical(obj, indent=1):
    """JSON text with every float as ``%.17g``; stable under read/write cycles."""
    return _encode(obj, indent, 0) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_canonical(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except ValueError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})")

"""Joint CAE + NMF clustering: initialisation, self-training loop, labelling.

The same loop trains the DCEC baseline; only the clustering head differs.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import cae as cae_mod
from .annotation import LabelMap
from .errors import InvalidInputError, TrainingFailureError
from .nmf import NMFHead, factorize, hard_labels, soft_labels, target_distribution

log = logging.getLogger(__name__)

MAX_DEGENERATE_EVENTS = 10
LOW_CONNECTIVITY_MAX_POINTS = 1


@dataclass
class TrainConfig:
    K: int = 3
    gamma: float = 0.1
    delta: float = 0.001
    pretrain_epochs: int = 200
    update_interval: int = 140
    max_steps: int = 20000
    batch_size: int = 256
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if self.K < 2:
            raise InvalidInputError("K must be >= 2")
        if self.gamma < 0:
            raise InvalidInputError("gamma must be >= 0")
        if not 0 < self.delta <= 1:
            raise InvalidInputError("delta must lie in (0, 1]")
        for name in ("pretrain_epochs", "update_interval", "max_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise InvalidInputError("lr must be > 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})


@dataclass
class Initialization:
    centers: np.ndarray      # (K, D) head parameters in row form
    P0: np.ndarray           # (N, K) target distribution rows
    labels0: np.ndarray      # (N,) 1-based
    flagged: np.ndarray      # (N,) bool, point_count <= 1


@dataclass
class DnmfcModel:
    cae: cae_mod.CaeModel
    W: np.ndarray                    # (36, K)
    config: TrainConfig
    trace: list = field(default_factory=list)
    initial_labels: np.ndarray = None
    flagged: np.ndarray = None
    converged: bool = False
    steps: int = 0
    method = "dnmfc"

    def head(self):
        return NMFHead(self.W)

    def soft_assign(self, x):
        h, _ = self.head().assign(self.cae.encode(np.atleast_2d(x)))
        return h

    def to_dict(self):
        out = {"method": self.method}
        out.update(self.cae.to_dict())
        out["W"] = self.W
        out["train_config"] = self.config.to_dict()
        out["training"] = _training_record(self)
        return out

    @classmethod
    def from_dict(cls, data):
        model = cls(cae_mod.CaeModel.from_dict(data), np.asarray(data["W"], dtype=np.float64),
                    TrainConfig.from_dict(data["train_config"]))
        _restore_training_record(model, data.get("training", {}))
        return model


def _training_record(model):
    return {
        "converged": bool(model.converged),
        "steps": int(model.steps),
        "trace": model.trace,
        "initial_labels": [] if model.initial_labels is None else model.initial_labels.tolist(),
        "flagged": [] if model.flagged is None else model.flagged.astype(int).tolist(),
    }


def _restore_training_record(model, rec):
    model.converged = bool(rec.get("converged", False))
    model.steps = int(rec.get("steps", 0))
    model.trace = list(rec.get("trace", []))
    if rec.get("initial_labels"):
        model.initial_labels = np.asarray(rec["initial_labels"], dtype=np.int64)
        model.flagged = np.asarray(rec["flagged"], dtype=bool)


def pooled(features):
    """Stack FeatureTables into (X, point_count)."""
    tables = features if isinstance(features, (list, tuple)) else [features]
    if not tables:
        raise InvalidInputError("no feature tables given")
    x = np.concatenate([t.features for t in tables]).astype(np.float64)
    counts = np.concatenate([t.point_count for t in tables]).astype(np.int64)
    if len(x) == 0:
        raise InvalidInputError("empty feature set")
    return x, counts


def low_connectivity(counts):
    return np.asarray(counts) <= LOW_CONNECTIVITY_MAX_POINTS


def _flagged_center(f, flagged):
    center = f[flagged].mean(axis=0) if flagged.any() else np.zeros(f.shape[1])
    if not np.any(center):
        center = center + 1e-6
    return center


def _unit_columns(W):
    W = W.copy()
    norms = np.linalg.norm(W, axis=0)
    W[:, norms == 0] = 1e-6
    return W / np.linalg.norm(W, axis=0)


def _finish_init(centers, h0, flagged):
    """Force low-connectivity voxels onto parcel 1 and build the first targets."""
    labels0 = np.argmax(h0, axis=1) + 1
    labels0[flagged] = 1
    h0 = h0.copy()
    h0[flagged] = 0.0
    h0[flagged, 0] = 1.0
    P0 = target_distribution(h0.T).T
    return Initialization(centers, P0, labels0, flagged)


def initialize(cae, features, config):
    """Initial W, targets and labels from the pretrained embedding.

    Column 1 of W is the mean embedding of low-connectivity voxels
    (point_count <= 1); columns 2..K are NMF components of the remaining
    voxels' embeddings. Columns are scaled to unit length so the scores
    W^T f compare directions rather than component magnitudes.
    """
    x, counts = pooled(features)
    K = config.K
    flagged = low_connectivity(counts)
    if np.count_nonzero(~flagged) < K:
        raise InvalidInputError(
            f"need at least K={K} voxels with point_count > 1, got {np.count_nonzero(~flagged)}")
    f = cae.encode(x)
    first = _flagged_center(f, flagged)
    rest = factorize(f[~flagged].T, K - 1, seed=config.seed).W
    W0 = _unit_columns(np.column_stack([first, rest]))
    h0 = soft_labels(W0, f.T).T
    return _finish_init(W0.T, h0, flagged)


def _farthest_voxel(f, centers):
    d2 = ((f[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return int(np.argmax(d2.min(axis=1)))


def joint_train(cae, features, config, head, init):
    """Minimise L_r + gamma * KL(P || soft labels) over CAE weights and the head.

    ``head`` must already hold the initial parameters. Targets P are refreshed
    every ``update_interval`` steps; training stops once the fraction of
    changed hard labels between refreshes falls below ``delta``.
    Returns (trained cae, trace, converged, steps).
    """
    x, _ = pooled(features)
    n = len(x)
    rng = np.random.default_rng([config.seed, 2])
    opt = cae_mod.Adam(lr=config.lr)
    params = dict(cae.parameters())
    params.update({f"head.{k}": v for k, v in head.parameters().items()})

    P = init.P0
    prev = init.labels0
    trace = []
    events = 0
    step = 0
    converged = False
    queue = []
    while step < config.max_steps:
        if not queue:
            queue = cae_mod.epoch_batches(n, config.batch_size, rng)
        idx = queue.pop(0)
        _, _, grads = cae_mod.loss_and_gradient(x[idx], cae, "total", head, P[idx], config.gamma)
        opt.step(params, grads)
        head.project()
        step += 1
        if step % config.update_interval and step < config.max_steps:
            continue

        f = cae.encode(x)
        H, _ = head.assign(f)
        dead = head.degenerate(H)
        while len(dead):
            events += 1
            if events > MAX_DEGENERATE_EVENTS:
                raise TrainingFailureError(
                    f"more than {MAX_DEGENERATE_EVENTS} degenerate-cluster events")
            k = int(dead[0])
            i = _farthest_voxel(f, head.centers())
            log.warning("step %d: cluster %d degenerate, reseeding from voxel %d", step, k + 1, i)
            head.reseed(k, f[i])
            H, _ = head.assign(f)
            dead = head.degenerate(H)

        l_r = float(np.mean((cae.decode(f) - x) ** 2))
        l_c = float(cae_mod.kl_rows(P, H).mean())
        P = target_distribution(H.T).T
        labels = hard_labels(H.T)
        frac = float(np.mean(labels != prev))
        prev = labels
        trace.append({"step": step, "loss": l_r + config.gamma * l_c,
                      "reconstruction": l_r, "clustering": l_c, "label_change": frac})
        log.info("step %d: L=%.6f Lr=%.6f Lc=%.6f change=%.5f",
                 step, l_r + config.gamma * l_c, l_r, l_c, frac)
        if frac < config.delta:
            converged = True
            break
    return cae, trace, converged, step


def train(cae, features, config=None):
    """Train DNMFC from a pretrained CAE on pooled training features."""
    config = config or TrainConfig()
    cae = cae.copy()
    init = initialize(cae, features, config)
    head = NMFHead(init.centers.T)
    cae, trace, converged, steps = joint_train(cae, features, config, head, init)
    return DnmfcModel(cae, head.W, config, trace, init.labels0, init.flagged, converged, steps)


# -- labelling --------------------------------------------------------------------

def check_inside(voxels, grid):
    voxels = np.asarray(voxels)
    if len(voxels) and (not np.all(grid.in_bounds(voxels))
                        or not np.all(grid.mask[voxels[:, 0], voxels[:, 1], voxels[:, 2]])):
        raise InvalidInputError("feature voxels fall outside the grid mask")
    if len(np.unique(voxels, axis=0)) != len(voxels):
        raise InvalidInputError("duplicate voxels")


def parcellate(model, features, grid, apply_filter=True):
    """Hard labels (argmax of soft labels, ties to the smaller index)."""
    check_inside(features.voxels, grid)
    h = model.soft_assign(features.features.astype(np.float64))
    labels = LabelMap(features.voxels, np.argmax(h, axis=1) + 1, h.shape[1])
    return median_filter(labels, grid) if apply_filter else labels


def median_filter(labels, grid):
    """One pass of 3x3x3 modal filtering over in-mask neighbours.

    Ties keep the voxel's own label when it is among the most frequent,
    otherwise the smallest tied label wins.
    """
    vox = labels.voxels
    if len(vox) != grid.n_voxels:
        raise InvalidInputError("label map must cover exactly the grid mask")
    check_inside(vox, grid)
    vol = np.zeros(tuple(d + 2 for d in grid.dims), dtype=np.int64)
    vol[vox[:, 0] + 1, vox[:, 1] + 1, vox[:, 2] + 1] = labels.labels
    offsets = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    nb = vol[(vox[:, None, 0] + 1 + offsets[:, 0]),
             (vox[:, None, 1] + 1 + offsets[:, 1]),
             (vox[:, None, 2] + 1 + offsets[:, 2])]
    K = labels.n_labels
    counts = np.stack([(nb == k).sum(axis=1) for k in range(1, K + 1)], axis=1)
    best = counts.max(axis=1)
    own = labels.labels
    keep = counts[np.arange(len(own)), own - 1] == best
    new = np.where(keep, own, np.argmax(counts, axis=1) + 1)
    return LabelMap(vox.copy(), new, K)

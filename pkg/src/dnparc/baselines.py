"""Comparison methods: DCEC (k-means centroids, Student-t soft assignment) and
flat NMF on the raw binary features."""

from dataclasses import dataclass, field

import numpy as np

from . import cae as cae_mod
from .annotation import LabelMap
from .dnmfc import (TrainConfig, _finish_init, _flagged_center, _restore_training_record,
                    _training_record, joint_train, low_connectivity, pooled)
from .errors import InvalidInputError
from .nmf import factorize, soft_labels


def _sq_dists(Z, C):
    d2 = (Z * Z).sum(axis=1)[:, None] - 2.0 * Z @ C.T + (C * C).sum(axis=1)[None, :]
    return np.maximum(d2, 0.0)


def kmeans(Z, K, seed=0, max_iters=300):
    """Lloyd's algorithm from k-means++ seeding; returns (centroids, 1-based labels).

    Nearest-centroid ties go to the smaller index; an emptied cluster is
    reseeded with the point farthest from its current centroid.
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or not np.all(np.isfinite(Z)):
        raise InvalidInputError("Z must be a finite (N, d) matrix")
    n = len(Z)
    if K < 1 or n < K:
        raise InvalidInputError(f"need N >= K >= 1, got N={n}, K={K}")
    rng = np.random.default_rng(seed)

    centers = np.empty((K, Z.shape[1]))
    centers[0] = Z[rng.integers(n)]
    closest = _sq_dists(Z, centers[:1])[:, 0]
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            i = int(np.searchsorted(np.cumsum(closest), rng.uniform(0, total), side="right"))
            i = min(i, n - 1)
        else:
            i = int(rng.integers(n))
        centers[k] = Z[i]
        closest = np.minimum(closest, _sq_dists(Z, centers[k:k + 1])[:, 0])

    labels = None
    for _ in range(max_iters):
        d2 = _sq_dists(Z, centers)
        new = np.argmin(d2, axis=1)
        spread = d2[np.arange(n), new]
        for k in range(K):
            if not np.any(new == k):
                far = int(np.argmax(spread))
                centers[k] = Z[far]
                new[far] = k
                spread[far] = -1.0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for k in range(K):
            centers[k] = Z[labels == k].mean(axis=0)
    return centers, labels + 1


def student_t_assign(Z, centroids):
    """Row-stochastic q_ik proportional to 1 / (1 + ||z_i - mu_k||^2)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    C = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if Z.shape[1] != C.shape[1]:
        raise InvalidInputError(f"Z {Z.shape} and centroids {C.shape} do not match")
    u = 1.0 / (1.0 + ((Z[:, None, :] - C[None, :, :]) ** 2).sum(axis=2))
    return u / u.sum(axis=1, keepdims=True)


class StudentTHead:
    """DCEC clustering layer with trainable centroids."""

    def __init__(self, centroids):
        self.centroids = np.array(centroids, dtype=np.float64)

    @property
    def n_clusters(self):
        return len(self.centroids)

    def parameters(self):
        return {"centroids": self.centroids}

    def assign(self, f):
        diff = f[:, None, :] - self.centroids[None, :, :]
        u = 1.0 / (1.0 + (diff ** 2).sum(axis=2))
        total = u.sum(axis=1, keepdims=True)
        q = u / total
        return q, (diff, u, q, total)

    def backward(self, cache, g_q):
        diff, u, q, total = cache
        g_u = (g_q - np.sum(g_q * q, axis=1, keepdims=True)) / total
        g_d2 = -g_u * u * u
        g_diff = 2.0 * g_d2[:, :, None] * diff
        return g_diff.sum(axis=1), {"centroids": -g_diff.sum(axis=0)}

    def degenerate(self, Q):
        return np.flatnonzero(Q.sum(axis=0) <= 0)

    def reseed(self, k, f):
        self.centroids[k] = f

    def project(self):
        pass

    def centers(self):
        return self.centroids


@dataclass
class DcecModel:
    cae: cae_mod.CaeModel
    centroids: np.ndarray            # (K, 36)
    config: TrainConfig
    trace: list = field(default_factory=list)
    initial_labels: np.ndarray = None
    flagged: np.ndarray = None
    converged: bool = False
    steps: int = 0
    method = "dcec"

    def head(self):
        return StudentTHead(self.centroids)

    def soft_assign(self, x):
        q, _ = self.head().assign(self.cae.encode(np.atleast_2d(x)))
        return q

    def to_dict(self):
        out = {"method": self.method}
        out.update(self.cae.to_dict())
        out["centroids"] = self.centroids
        out["train_config"] = self.config.to_dict()
        out["training"] = _training_record(self)
        return out

    @classmethod
    def from_dict(cls, data):
        model = cls(cae_mod.CaeModel.from_dict(data),
                    np.asarray(data["centroids"], dtype=np.float64),
                    TrainConfig.from_dict(data["train_config"]))
        _restore_training_record(model, data.get("training", {}))
        return model


def dcec_initialize(cae, features, config):
    """Centroid 1 from low-connectivity voxels, the rest by k-means on the others."""
    x, counts = pooled(features)
    K = config.K
    flagged = low_connectivity(counts)
    if np.count_nonzero(~flagged) < K:
        raise InvalidInputError(
            f"need at least K={K} voxels with point_count > 1, got {np.count_nonzero(~flagged)}")
    f = cae.encode(x)
    rest, _ = kmeans(f[~flagged], K - 1, seed=config.seed)
    centroids = np.vstack([_flagged_center(f, flagged), rest])
    return _finish_init(centroids, student_t_assign(f, centroids), flagged)


def dcec_train(cae, features, config=None):
    config = config or TrainConfig()
    cae = cae.copy()
    init = dcec_initialize(cae, features, config)
    head = StudentTHead(init.centers)
    cae, trace, converged, steps = joint_train(cae, features, config, head, init)
    return DcecModel(cae, head.centroids, config, trace, init.labels0, init.flagged,
                     converged, steps)


def flat_nmf_parcellate(features, K, seed=0, max_iters=2000):
    """Per-subject NMF of the raw (6, N) feature matrix; labels from argmax of H.

    The factorisation is seeded like the deep model: component 1 is the mean
    feature vector of low-connectivity voxels and their coefficient columns
    start one-hot on parcel 1.
    """
    x = features.features.astype(np.float64)
    n = len(x)
    if K < 2 or n < K:
        raise InvalidInputError(f"need N >= K >= 2, got N={n}, K={K}")
    flagged = low_connectivity(features.point_count)
    rest_x = x[~flagged]
    if len(rest_x) < K - 1:
        raise InvalidInputError(f"need at least {K - 1} voxels with point_count > 1")
    first = _flagged_center(x, flagged)
    rest = factorize(rest_x.T, K - 1, max_iters=max_iters, seed=seed).W
    W0 = np.column_stack([first, rest])
    H0 = soft_labels(W0, x.T)
    H0[:, flagged] = 0.0
    H0[0, flagged] = 1.0
    fit = factorize(x.T, K, max_iters=max_iters, seed=seed, init=(W0, H0))
    H = fit.H
    sums = H.sum(axis=0, keepdims=True)
    H = np.where(sums > 0, H / np.where(sums > 0, sums, 1.0), 1.0 / K)
    return LabelMap(features.voxels.copy(), np.argmax(H, axis=0) + 1, K)

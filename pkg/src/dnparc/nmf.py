"""Frobenius NMF, NMF soft labels, DEC-style target distribution, KL loss.

Matrices follow the column convention: ``F`` is (D, N) with one column per
voxel, ``W`` is (D, K), ``H`` / ``P`` are (K, N).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateClusterError, InvalidInputError

EPS = 1e-12
KL_FLOOR = 1e-12


@dataclass
class FactorPair:
    W: np.ndarray
    H: np.ndarray
    objective: list = field(default_factory=list)

    @property
    def n_iter(self):
        return max(len(self.objective) - 1, 0)


def nmf_objective(F, W, H):
    R = F - W @ H
    return 0.5 * float(np.sum(R * R))


def _check_nonneg(name, M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise InvalidInputError(f"{name} must be a matrix")
    if not np.all(np.isfinite(M)):
        raise InvalidInputError(f"{name} has non-finite entries")
    if np.any(M < 0):
        raise InvalidInputError(f"{name} has negative entries")
    return M


def factorize(F, K, max_iters=2000, seed=0, tol=1e-9, init=None, inner_updates=3):
    """Lee-Seung multiplicative updates for min 0.5 * ||F - WH||_F^2.

    Starts from seeded uniform positive factors (or ``init=(W0, H0)``) and stops
    after ``max_iters`` sweeps or once the relative objective decrease drops
    below ``tol``. Each sweep applies ``inner_updates`` H updates and then as
    many W updates, reusing the products that do not change within the block;
    every single update is non-increasing, so the sweep is too. ``objective``
    records the value before the first sweep and after every sweep.
    """
    F = _check_nonneg("F", F)
    d, n = F.shape
    if K < 1:
        raise InvalidInputError("K must be >= 1")
    if K > n:
        raise InvalidInputError(f"K={K} exceeds the number of columns N={n}")
    if init is None:
        rng = np.random.default_rng(seed)
        scale = np.sqrt(max(F.mean(), EPS) / K)
        W = rng.uniform(0.0, 1.0, size=(d, K)) * scale + EPS
        H = rng.uniform(0.0, 1.0, size=(K, n)) * scale + EPS
    else:
        W = _check_nonneg("W0", init[0]).copy()
        H = _check_nonneg("H0", init[1]).copy()
        if W.shape != (d, K) or H.shape != (K, n):
            raise InvalidInputError("initial factors have the wrong shape")

    if inner_updates < 1:
        raise InvalidInputError("inner_updates must be >= 1")
    obj = [nmf_objective(F, W, H)]
    for _ in range(max_iters):
        WtF, WtW = W.T @ F, W.T @ W
        for _ in range(inner_updates):
            H *= WtF / (WtW @ H + EPS)
        FHt, HHt = F @ H.T, H @ H.T
        for _ in range(inner_updates):
            W *= FHt / (W @ HHt + EPS)
        obj.append(nmf_objective(F, W, H))
        prev, cur = obj[-2], obj[-1]
        if prev <= 0 or (prev - cur) / prev < tol:
            break
    return FactorPair(W, H, obj)


def soft_labels(W, F):
    """Column-stochastic soft labels from scores W^T F (shifted by EPS, l1-normalised)."""
    W = np.asarray(W, dtype=np.float64)
    F = np.asarray(F, dtype=np.float64)
    if W.ndim != 2 or F.ndim != 2 or W.shape[0] != F.shape[0]:
        raise InvalidInputError(f"W {W.shape} and F {F.shape} do not match")
    S = W.T @ F + EPS
    return S / S.sum(axis=0, keepdims=True)


def target_distribution(H):
    """Sharpened targets p_ik = (h_ik^2 / f_k) / sum_k' (h_ik'^2 / f_k'), f_k = sum_i h_ik."""
    H = np.asarray(H, dtype=np.float64)
    mass = H.sum(axis=1)
    dead = np.flatnonzero(mass <= 0)
    if len(dead):
        raise DegenerateClusterError(f"clusters {list(dead + 1)} have zero mass", dead)
    weight = H ** 2 / mass[:, None]
    return weight / weight.sum(axis=0, keepdims=True)


def clustering_loss(P, H):
    """KL(P || H) summed over voxels (columns) and clusters; 0 log 0 = 0."""
    P = np.asarray(P, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if P.shape != H.shape:
        raise InvalidInputError(f"P {P.shape} and H {H.shape} differ")
    Hc = np.maximum(H, KL_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(Hc)), 0.0)
    return float(terms.sum())


def hard_labels(H):
    """1-based argmax per column; ties go to the smallest index."""
    return np.argmax(np.asarray(H), axis=0) + 1


class NMFHead:
    """Trainable NMF clustering layer: soft labels of embeddings against W.

    Works on row-major embeddings (batch, D) and returns (batch, K) soft labels.
    """

    def __init__(self, W):
        self.W = np.array(W, dtype=np.float64)

    @property
    def n_clusters(self):
        return self.W.shape[1]

    def parameters(self):
        return {"W": self.W}

    def assign(self, f):
        S = f @ self.W + EPS
        total = S.sum(axis=1, keepdims=True)
        return S / total, (f, S / total, total)

    def backward(self, cache, g_h):
        f, H, total = cache
        g_s = (g_h - np.sum(g_h * H, axis=1, keepdims=True)) / total
        return g_s @ self.W.T, {"W": f.T @ g_s}

    def degenerate(self, H):
        """Indices of clusters with zero soft mass or an all-zero column."""
        mass = H.sum(axis=0)
        return np.flatnonzero((mass <= 0) | ~np.any(self.W > 0, axis=0))

    def reseed(self, k, f):
        self.W[:, k] = f

    def project(self):
        np.maximum(self.W, 0.0, out=self.W)

    def centers(self):
        return self.W.T

"""Point-cloud generation metrics.

Conventions:

* Chamfer distance sums, over both directions, the mean squared distance to
  the nearest neighbour in the other cloud.
* Earth mover's distance is the mean Euclidean distance under the optimal
  bijection between two equal-size clouds (exact assignment).
* MMD averages, over reference clouds, the distance to the closest generated
  cloud.  COV is the fraction of reference clouds that are the nearest
  reference of at least one generated cloud.
* JSD compares occupancy histograms of the pooled points on a uniform grid
  over ``[-1, 1]^dim``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


class DegenerateCloudError(ValueError):
    pass


class SizeMismatchError(ValueError):
    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


def _cloud(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError(f"expected a nonempty (N, dim) cloud, got shape {X.shape}")
    return X


def normalize_bbox(X) -> np.ndarray:
    """Center the tight bounding box at 0 and scale its largest half-extent to 1."""
    X = _cloud(X)
    lo, hi = X.min(axis=0), X.max(axis=0)
    half = (hi - lo).max() / 2.0
    if not half > 0:
        raise DegenerateCloudError("cloud has zero extent along every axis")
    return (X - (lo + hi) / 2.0) / half


def chamfer(X, Y) -> float:
    X, Y = _cloud(X), _cloud(Y)
    d2 = cdist(X, Y, "sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def emd(X, Y) -> float:
    X, Y = _cloud(X), _cloud(Y)
    if len(X) != len(Y):
        raise SizeMismatchError(f"EMD needs equal sizes, got {len(X)} and {len(Y)}")
    cost = cdist(X, Y)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / len(X))


DISTANCES = {"CD": chamfer, "EMD": emd}


def distance_matrix(gen, ref, dist="CD") -> np.ndarray:
    """``D[i, j] = dist(gen[i], ref[j])``.  Mismatched EMD pairs raise with their indices."""
    fn = DISTANCES[dist] if isinstance(dist, str) else dist
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("cloud sets must be nonempty")
    D = np.empty((len(gen), len(ref)))
    for i, X in enumerate(gen):
        for j, Y in enumerate(ref):
            try:
                D[i, j] = fn(X, Y)
            except SizeMismatchError as exc:
                raise SizeMismatchError(f"gen[{i}] vs ref[{j}]: {exc}", pair=(i, j)) from exc
    return D


def mmd(gen, ref, dist="CD", D=None) -> float:
    D = distance_matrix(gen, ref, dist) if D is None else D
    return float(D.min(axis=0).mean())


def cov(gen, ref, dist="CD", D=None) -> float:
    D = distance_matrix(gen, ref, dist) if D is None else D
    # argmin returns the first minimum, i.e. ties go to the lowest reference index
    return len(set(D.argmin(axis=1).tolist())) / D.shape[1]


def occupancy(clouds, grid_res: int) -> np.ndarray:
    """Normalized histogram of all points on the ``grid_res^dim`` grid over ``[-1, 1]^dim``.

    A point exactly on an interior cell edge goes to the lower-index cell.
    """
    pts = np.concatenate([_cloud(c) for c in clouds])
    dim = pts.shape[1]
    width = 2.0 / grid_res
    idx = np.ceil((pts + 1.0) / width).astype(np.int64) - 1
    idx = np.clip(idx, 0, grid_res - 1)
    flat = np.ravel_multi_index(idx.T, (grid_res,) * dim)
    hist = np.bincount(flat, minlength=grid_res**dim).astype(np.float64)
    return hist / hist.sum()


def jsd(gen, ref, grid_res: int = 32) -> float:
    if len(gen) == 0 or len(ref) == 0:
        raise ValueError("cloud sets must be nonempty")
    if grid_res < 2:
        raise ValueError("grid_res must be >= 2")
    P, Q = occupancy(gen, grid_res), occupancy(ref, grid_res)
    M = 0.5 * (P + Q)

    def kl(A):
        m = A > 0
        return float(np.sum(A[m] * np.log(A[m] / M[m])))

    return min(max(0.5 * kl(P) + 0.5 * kl(Q), 0.0), math.log(2.0))

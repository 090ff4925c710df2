"""Deterministic point-cloud processing: outlier filtering, farthest-point
sampling, fixed-size resampling and body-patch grouping.

Clouds are (n, 3) float arrays in the global frame, meters. The network-side
pipeline works on exactly N_POINTS points grouped into N_GROUPS patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCloudError, SizeError, TooFewPointsError

N_POINTS = 384       # fixed cloud size after resampling
N_GROUPS = 32        # body-patch groups
PATCH_K = 24         # points per patch (k-NN including the center)
PAD_SIGMA = 0.01     # jitter for synthetic pad points, meters


@dataclass(frozen=True)
class BodyPatchSet:
    """FPS centers and their center-subtracted k-NN patches."""

    centers: np.ndarray   # (n_g, 3)
    patches: np.ndarray   # (n_g, k, 3), center-subtracted

    @property
    def n_groups(self):
        return self.centers.shape[0]

    @property
    def patch_size(self):
        return self.patches.shape[1]


def remove_outliers(points, k_neighbors=8, std_ratio=2.0):
    """Statistical outlier removal.

    Each point's mean distance to its k nearest neighbors is compared with
    the population: points beyond mean + std_ratio * std are dropped. Order
    of the retained points is preserved. The threshold carries a 1 nm slack
    so perfectly homogeneous clouds (population std at machine-noise level)
    are never culled by ulp differences.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n <= k_neighbors:
        raise TooFewPointsError(f"need more than {k_neighbors} points, got {n}")
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    idx = np.argpartition(d2, k_neighbors - 1, axis=1)[:, :k_neighbors]
    knn_d = np.sqrt(np.take_along_axis(d2, idx, axis=1))
    mean_d = knn_d.mean(axis=1)
    keep = mean_d <= mean_d.mean() + std_ratio * mean_d.std() + 1e-9
    return points[keep]


def lowest_point_index(points):
    """Index of the lowest point (ties by x then z): the deterministic FPS seed."""
    points = np.asarray(points)
    order = np.lexsort((points[:, 2], points[:, 0], points[:, 1]))
    return int(order[0])


def fps(points, m, start_index):
    """Greedy farthest-point sampling: returns m point indices.

    First pick is start_index; every next pick maximizes the minimum distance
    to the already-picked set, ties broken by lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise SizeError(f"m={m} outside [1, {n}]")
    if not 0 <= start_index < n:
        raise SizeError(f"start_index={start_index} outside [0, {n})")
    picked = np.empty(m, dtype=np.int64)
    picked[0] = start_index
    min_d2 = np.sum((points - points[start_index]) ** 2, axis=-1)
    for i in range(1, m):
        nxt = int(np.argmax(min_d2))        # argmax takes the lowest index on ties
        picked[i] = nxt
        d2 = np.sum((points - points[nxt]) ** 2, axis=-1)
        np.minimum(min_d2, d2, out=min_d2)
    return picked


def resample_fixed(points, rng_seed=0, target=N_POINTS):
    """Resample a cloud to exactly `target` points.

    Oversized clouds keep an FPS subset (seeded at the lowest point);
    undersized clouds are padded with jittered copies of existing points
    drawn from a seeded generator.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise EmptyCloudError("cannot resample an empty cloud")
    if n == target:
        return points.copy()
    if n > target:
        idx = fps(points, target, lowest_point_index(points))
        return points[idx]
    rng = np.random.default_rng(rng_seed)
    src = rng.integers(0, n, size=target - n)
    jitter = rng.normal(0.0, PAD_SIGMA, size=(target - n, 3))
    return np.concatenate([points, points[src] + jitter], axis=0)


def group_body_patches(points, n_groups=N_GROUPS, k=PATCH_K, start_index=None):
    """Split a fixed-size cloud into center-subtracted k-NN body patches.

    Centers come from FPS; each patch is the k nearest points to its center
    (the center included) minus the center, so patches encode local shape
    only. Translating the cloud shifts centers and leaves patches unchanged.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k > n:
        raise SizeError(f"patch size k={k} exceeds cloud size {n}")
    if start_index is None:
        start_index = lowest_point_index(points)
    center_idx = fps(points, n_groups, start_index)
    centers = points[center_idx]
    d2 = np.sum((points[None, :, :] - centers[:, None, :]) ** 2, axis=-1)  # (n_g, n)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    patches = points[nn] - centers[:, None, :]
    return BodyPatchSet(centers=centers, patches=patches)

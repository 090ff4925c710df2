"""Point-cloud op tests against brute-force oracles."""

import numpy as np
import pytest

from lidarmocap.errors import EmptyCloudError, SizeError, TooFewPointsError
from lidarmocap.pointcloud import (
    N_POINTS,
    PAD_SIGMA,
    fps,
    group_body_patches,
    lowest_point_index,
    remove_outliers,
    resample_fixed,
)


def mean_knn_distance_oracle(points, k):
    """Brute-force mean distance of each point to its k nearest neighbors."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        d = np.sort(np.linalg.norm(points - p, axis=1))
        out[i] = d[1:k + 1].mean()      # d[0] is the point itself
    return out


def fps_oracle(points, m, start):
    """Maximin selection recomputed from scratch at every step."""
    picked = [start]
    for _ in range(m - 1):
        best, best_d = None, -1.0
        for i in range(len(points)):
            d = min(np.linalg.norm(points[i] - points[j]) for j in picked)
            if d > best_d + 1e-15:
                best, best_d = i, d
        picked.append(best)
    return picked


def ball_with_outliers(seed, n_inliers=100, outliers=((10.0, 0.0, 0.0),)):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n_inliers, 3))
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    r = 0.5 * rng.uniform(0, 1, size=(n_inliers, 1)) ** (1 / 3)
    return np.concatenate([v * r, np.array(outliers, dtype=float)], axis=0)


def test_remove_outliers_single_far_point():
    pts = ball_with_outliers(0)
    kept = remove_outliers(pts, k_neighbors=8, std_ratio=2.0)
    assert kept.shape == (100, 3)
    np.testing.assert_array_equal(kept, pts[:100])
    # agreement with the brute-force criterion
    md = mean_knn_distance_oracle(pts, 8)
    keep_mask = md <= md.mean() + 2.0 * md.std()
    np.testing.assert_array_equal(kept, pts[keep_mask])


def ring_points(n=60, radius=1.0):
    """Evenly spaced circle: every point has identical neighbor geometry."""
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    return np.stack([radius * np.cos(t), np.zeros(n), radius * np.sin(t)], axis=1)


def test_remove_outliers_keeps_homogeneous_ring():
    ring = ring_points()
    np.testing.assert_array_equal(remove_outliers(ring, 8, 2.0), ring)
    # std of the mean-kNN distances is ~0, so even ratio 0 keeps everything
    np.testing.assert_array_equal(remove_outliers(ring, 8, 0.0), ring)


def test_remove_outliers_keeps_grid_interior_statistics():
    # a bounded grid has genuinely larger corner kNN distances; a ratio wide
    # enough to cover that boundary effect must keep the whole grid
    g = np.linspace(0, 1, 5)
    grid = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
    kept = remove_outliers(grid, k_neighbors=8, std_ratio=3.5)
    np.testing.assert_array_equal(kept, grid)


def test_remove_outliers_symmetric_pair():
    pts = np.concatenate([ring_points(), [[10.0, 0, 0], [-10.0, 0, 0]]])
    kept = remove_outliers(pts, k_neighbors=8, std_ratio=2.0)
    np.testing.assert_array_equal(kept, pts[:60])


def test_remove_outliers_idempotent_when_stats_unchanged():
    # inliers with identical neighbor statistics plus far outliers: removal
    # leaves the inlier mean-distance population untouched, so a second pass
    # is a no-op (the spec's qualified idempotency)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        far = rng.uniform(5, 15, size=(3, 3))
        pts = np.concatenate([ring_points(48 + seed), far])
        once = remove_outliers(pts, 8, 2.0)
        np.testing.assert_array_equal(once, pts[:48 + seed])
        twice = remove_outliers(once, 8, 2.0)
        np.testing.assert_array_equal(once, twice)


def test_remove_outliers_too_few_points():
    with pytest.raises(TooFewPointsError):
        remove_outliers(np.zeros((5, 3)), k_neighbors=8)


def test_fps_collinear():
    pts = np.array([[0, 0, 0], [0.4, 0, 0], [1.0, 0, 0]])
    np.testing.assert_array_equal(fps(pts, 2, 0), [0, 2])


def test_fps_square_corners():
    corners = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0]])
    picked = sorted(fps(corners, 4, 0))
    assert picked == [0, 1, 2, 3]


def test_fps_full_set_deterministic():
    rng = np.random.default_rng(4)
    pts = rng.normal(size=(9, 3))
    a = fps(pts, 9, 2)
    b = fps(pts, 9, 2)
    np.testing.assert_array_equal(a, b)
    assert sorted(a) == list(range(9))


def test_fps_matches_exhaustive_oracle_small_sets():
    rng = np.random.default_rng(8)
    for n in range(1, 9):
        for trial in range(20):
            pts = rng.uniform(-1, 1, size=(n, 3))
            for m in range(1, n + 1):
                got = list(fps(pts, m, 0))
                assert got == fps_oracle(pts, m, 0), (n, m, trial)


def test_fps_permutation_stable_in_value():
    rng = np.random.default_rng(9)
    pts = rng.normal(size=(40, 3))
    sel = pts[fps(pts, 12, lowest_point_index(pts))]
    perm = rng.permutation(40)
    shuffled = pts[perm]
    sel_shuffled = shuffled[fps(shuffled, 12, lowest_point_index(shuffled))]
    a = set(map(tuple, np.round(sel, 12)))
    b = set(map(tuple, np.round(sel_shuffled, 12)))
    assert a == b


def test_fps_size_errors():
    pts = np.zeros((3, 3))
    with pytest.raises(SizeError):
        fps(pts, 4, 0)
    with pytest.raises(SizeError):
        fps(pts, 0, 0)


def test_resample_noop_at_target():
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(N_POINTS, 3))
    np.testing.assert_array_equal(resample_fixed(pts, 0), pts)


def test_resample_downsamples_to_subset():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(500, 3))
    out = resample_fixed(pts, 0)
    assert out.shape == (N_POINTS, 3)
    pool = set(map(tuple, pts))
    assert all(tuple(p) in pool for p in out)
    # matches FPS directly on a small case
    small = rng.normal(size=(6, 3))
    out_small = resample_fixed(small, 0, target=4)
    np.testing.assert_array_equal(out_small, small[fps(small, 4, lowest_point_index(small))])


def test_resample_pads_with_jitter():
    rng = np.random.default_rng(12)
    pts = rng.normal(size=(100, 3))
    out = resample_fixed(pts, rng_seed=77)
    assert out.shape == (N_POINTS, 3)
    np.testing.assert_array_equal(out[:100], pts)
    # every pad point sits within a few sigma of some original
    d = np.linalg.norm(out[100:, None, :] - pts[None, :, :], axis=-1).min(axis=1)
    assert (d < 3 * PAD_SIGMA * np.sqrt(3) + 1e-12).mean() > 0.95
    assert d.max() < 6 * PAD_SIGMA
    # deterministic for a fixed seed
    np.testing.assert_array_equal(out, resample_fixed(pts, rng_seed=77))
    assert np.abs(out - resample_fixed(pts, rng_seed=78)).max() > 0


def test_resample_empty_cloud():
    with pytest.raises(EmptyCloudError):
        resample_fixed(np.zeros((0, 3)), 0)


def test_patches_translation_invariance():
    rng = np.random.default_rng(13)
    pts = rng.normal(size=(N_POINTS, 3))
    t = np.array([5.0, -2.0, 9.0])
    a = group_body_patches(pts)
    b = group_body_patches(pts + t)
    np.testing.assert_allclose(a.patches, b.patches, atol=1e-12)
    np.testing.assert_allclose(b.centers - a.centers, np.tile(t, (32, 1)), atol=1e-12)


def test_patches_k1_zero_vectors():
    rng = np.random.default_rng(14)
    pts = rng.normal(size=(64, 3))
    out = group_body_patches(pts, n_groups=8, k=1)
    np.testing.assert_array_equal(out.patches, np.zeros((8, 1, 3)))


def test_patches_two_blobs_knn_oracle():
    rng = np.random.default_rng(15)
    blob_a = rng.normal(size=(192, 3)) * 0.1
    blob_b = rng.normal(size=(192, 3)) * 0.1 + np.array([10.0, 0, 0])
    pts = np.concatenate([blob_a, blob_b])
    out = group_body_patches(pts, n_groups=2, k=24, start_index=0)
    # one center per blob
    cx = np.sort(out.centers[:, 0])
    assert cx[0] < 5 < cx[1]
    # each patch entirely from its own blob, matching a brute-force k-NN
    for g in range(2):
        c = out.centers[g]
        d = np.linalg.norm(pts - c, axis=1)
        knn = pts[np.argsort(d, kind="stable")[:24]] - c
        np.testing.assert_array_equal(out.patches[g], knn)
        side = pts[np.argmin(np.linalg.norm(pts - c, axis=1))][0] < 5
        assert np.all((np.abs(out.patches[g] + c)[:, 0] < 5) == side)


def test_patches_centers_are_input_points():
    rng = np.random.default_rng(16)
    pts = rng.normal(size=(N_POINTS, 3))
    out = group_body_patches(pts)
    pool = set(map(tuple, pts))
    assert all(tuple(c) in pool for c in out.centers)
    # each patch mean equals the k-NN mean minus the center
    for g in range(out.n_groups):
        assert np.linalg.norm(out.patches[g].mean(axis=0)
                              - (out.patches[g] + out.centers[g]).mean(axis=0)
                              + out.centers[g]) < 1e-12


def test_patches_k_too_large():
    with pytest.raises(SizeError):
        group_body_patches(np.zeros((10, 3)), n_groups=2, k=11)

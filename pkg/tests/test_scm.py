import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psm import scm
from psm.scm import BACKGROUND, FOREGROUND, IGNORE
from psm.tensor import ShapeError

# -- alpha and PSM --------------------------------------------------------


def test_alpha_examples():
    assert scm.compute_alpha(np.ones((1, 2, 2))).tolist() == [1.0]
    assert scm.compute_alpha(np.array([[[1, -1], [1, -1]]])).tolist() == [0.0]


def test_alpha_equals_direct_summation():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(5, 7, 3))
    expected = [sum(g[k, i, j] for i in range(7) for j in range(3)) / 21 for k in range(5)]
    np.testing.assert_allclose(scm.compute_alpha(g), expected, rtol=0, atol=1e-12)


def test_alpha_rejects_empty():
    with pytest.raises(ShapeError):
        scm.compute_alpha(np.zeros((2, 0, 3)))


def test_psm_hand_case():
    a = np.array([[[1.0, -1.0], [0.0, 2.0]]])
    np.testing.assert_array_equal(scm.compute_psm(a, [1.0], (2, 2), rescale=False), [[1, 0], [0, 2]])
    np.testing.assert_array_equal(scm.compute_psm(a, [1.0], (2, 2)), [[0.5, 0], [0, 1]])


def test_psm_zero_alpha_is_zero_map():
    a = np.random.default_rng(1).normal(size=(3, 4, 4))
    assert not scm.compute_psm(a, np.zeros(3), (8, 8)).any()


def test_psm_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    a, alpha = rng.normal(size=(2, 5, 6)), rng.normal(size=2)
    got = scm.compute_psm(a, alpha, (5, 6), rescale=False)
    ref = np.zeros((5, 6))
    for i in range(5):
        for j in range(6):
            ref[i, j] = max(alpha[0] * a[0, i, j] + alpha[1] * a[1, i, j], 0.0)
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_psm_alpha_length_mismatch():
    with pytest.raises(ShapeError):
        scm.compute_psm(np.zeros((3, 2, 2)), [1.0, 2.0], (2, 2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_psm_positive_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    a, alpha = rng.normal(size=(3, 4, 4)), rng.normal(size=3)
    raw = scm.compute_psm(a, alpha, (8, 8), rescale=False)
    np.testing.assert_allclose(scm.compute_psm(a, c * alpha, (8, 8), rescale=False), c * raw, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scm.compute_psm(a, c * alpha, (8, 8)), scm.compute_psm(a, alpha, (8, 8)), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(2, 2), (4, 4), (8, 8)]))
def test_psm_range_and_size(seed, hw):
    rng = np.random.default_rng(seed)
    m = scm.compute_psm(rng.normal(size=(4,) + hw), rng.normal(size=4), (16, 16))
    assert m.shape == (16, 16) and m.min() >= 0 and m.max() <= 1


def test_bilinear_resize_preserves_constants_and_linear_ramps():
    np.testing.assert_allclose(scm.bilinear_resize(np.full((4, 4), 3.0), (16, 16)), 3.0)
    ramp = scm.bilinear_resize(np.arange(4.0)[None].repeat(2, 0), (2, 8))
    # interior samples of a linear ramp stay on the line
    np.testing.assert_allclose(np.diff(ramp[0, 1:-1]), 0.5)


# -- fusion ---------------------------------------------------------------


def test_fuse_hand_value():
    f = scm.fuse(np.full((1, 1), 0.2), np.full((1, 1, 3), 0.1), 2.5)
    np.testing.assert_allclose(f[0, 0], [0.2, 0.25, 0.25, 0.25])


def test_fuse_zero_beta_leaves_psm_only():
    rng = np.random.default_rng(0)
    psm = rng.uniform(size=(4, 4))
    f = scm.fuse(psm, rng.uniform(size=(4, 4, 3)), 0.0)
    np.testing.assert_array_equal(f[..., 0], psm)
    assert not f[..., 1:].any()


def test_fuse_accepts_chw_and_rejects_size_mismatch():
    raw = np.random.default_rng(0).uniform(size=(3, 4, 5))
    np.testing.assert_allclose(scm.fuse(np.zeros((4, 5)), raw, 2.0)[..., 1:], 2 * raw.transpose(1, 2, 0))
    with pytest.raises(ShapeError):
        scm.fuse(np.zeros((3, 3)), raw, 1.0)


# -- k-means --------------------------------------------------------------


def test_kmeans_separated_pair():
    r = scm.kmeans(np.array([0.0, 10.0]), 2)
    assert sorted(r.centroids.ravel()) == [0.0, 10.0] and r.objective == 0.0


def test_kmeans_three_points():
    r = scm.kmeans(np.array([0.0, 1.0, 10.0]), 2, n_init=5)
    assert r.assignments[0] == r.assignments[1] != r.assignments[2]
    assert r.objective == pytest.approx(0.5)


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ValueError):
        scm.kmeans(np.zeros((2, 2)), 3)


def _best_two_partition(x):
    best = np.inf
    n = len(x)
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.min() == lab.max():
            continue
        cost = sum(((x[lab == j] - x[lab == j].mean(axis=0)) ** 2).sum() for j in (0, 1))
        best = min(best, cost)
    return best


def test_kmeans_equals_exhaustive_optimum():
    for trial in range(100):
        rng = np.random.default_rng(trial)
        x = rng.normal(size=(int(rng.integers(2, 9)), 2))
        r = scm.kmeans(x, 2, seed=trial, n_init=10)
        assert r.objective == pytest.approx(_best_two_partition(x), rel=1e-9, abs=1e-12), trial


def test_kmeans_objective_nonincreasing_and_repairs_empty_clusters():
    rng = np.random.default_rng(0)
    # duplicated points make empty clusters likely
    x = np.repeat(rng.normal(size=(4, 3)), 20, axis=0)
    for seed in range(30):
        r = scm.kmeans(x, 4, seed=seed)
        assert all(b <= a + 1e-9 for a, b in zip(r.history, r.history[1:]))
        assert len(np.unique(r.assignments)) == 4


def test_cluster_pixels_subsample_then_assign_all():
    rng = np.random.default_rng(0)
    fused = np.where(rng.uniform(size=(60, 60, 1)) > 0.5, 1.0, 0.0) + rng.normal(0, 0.01, (60, 60, 1))
    labels, res = scm.cluster_pixels(fused, k=2, max_pixels=500)
    assert labels.shape == (60, 60)
    np.testing.assert_array_equal(labels, scm._sqdist(fused.reshape(-1, 1), res.centroids).argmin(1).reshape(60, 60))
    assert (labels == labels[fused[..., 0] > 0.5][0]).sum() == (fused[..., 0] > 0.5).sum()


# -- pseudo masks ---------------------------------------------------------


def _blob_image(seed=0, size=32):
    """Bright disks on a dark textured ground, with a PSM that favours the disks."""
    rng = np.random.default_rng(seed)
    rr, cc = np.mgrid[0:size, 0:size]
    truth = np.zeros((size, size), bool)
    for r, c in [(8, 8), (8, 22), (22, 14)]:
        truth |= (rr - r) ** 2 + (cc - c) ** 2 <= 16
    raw = np.where(truth, 0.85, 0.2)[..., None] + rng.normal(0, 0.05, (size, size, 3))
    psm = np.clip(np.where(truth, 0.8, 0.1) + rng.normal(0, 0.05, (size, size)), 0, 1)
    return scm.fuse(psm, np.clip(raw, 0, 1), 2.5), truth


@pytest.mark.parametrize("rule", ["psm", "contrast"])
def test_blob_pixels_become_foreground(rule):
    from psm.metrics import pixel_iou_f1

    fused, truth = _blob_image()
    labels, _ = scm.cluster_pixels(fused, 3, seed=0)
    mask, ok = scm.clusters_to_mask(labels, fused, "segmentation", rule)
    assert ok
    assert pixel_iou_f1(mask == FOREGROUND, truth)[1] >= 0.9


def test_constant_image_is_all_background():
    fused = scm.fuse(np.zeros((8, 8)), np.full((8, 8, 3), 0.5), 2.5)
    labels, _ = scm.cluster_pixels(fused, 3)
    mask, ok = scm.clusters_to_mask(labels, fused)
    assert not ok and not mask.any()


@pytest.mark.parametrize("rule", ["psm", "contrast"])
@pytest.mark.parametrize("task", ["segmentation", "multiclass-detection"])
def test_mask_invariant_under_cluster_relabeling(rule, task):
    fused, _ = _blob_image(3)
    labels, _ = scm.cluster_pixels(fused, 3, seed=1)
    base, _ = scm.clusters_to_mask(labels, fused, task, rule)
    for perm in itertools.permutations(range(3)):
        relabeled = np.array(perm)[labels]
        assert np.array_equal(scm.clusters_to_mask(relabeled, fused, task, rule)[0], base)


def test_detection_classes_follow_stain_colour():
    # brown cells (red > blue) become class 1, purple cells class 2
    raw = np.full((10, 10, 3), (0.92, 0.86, 0.88))
    raw[1:4, 1:4] = (0.55, 0.33, 0.18)
    raw[6:9, 6:9] = (0.36, 0.28, 0.58)
    psm = np.zeros((10, 10))
    psm[1:4, 1:4] = psm[6:9, 6:9] = 1.0
    fused = scm.fuse(psm, raw, 4.0)
    labels, _ = scm.cluster_pixels(fused, 3)
    for rule in ("psm", "contrast"):
        mask, ok = scm.clusters_to_mask(labels, fused, "multiclass-detection", rule)
        assert ok and (mask[1:4, 1:4] == 1).all() and (mask[6:9, 6:9] == 2).all()
        assert mask.sum() == 9 + 18


def test_middle_cluster_can_be_ignored():
    fused, _ = _blob_image(0)
    labels, _ = scm.cluster_pixels(fused, 3)
    bg, _ = scm.clusters_to_mask(labels, fused, middle="background")
    ig, _ = scm.clusters_to_mask(labels, fused, middle="ignore")
    assert set(np.unique(bg)) <= {0, 1} and set(np.unique(ig)) <= {0, 1, IGNORE}
    assert np.array_equal(bg == FOREGROUND, ig == FOREGROUND)


def test_dataset_clustering_labels_consistently():
    maps, truths = zip(*[_blob_image(s) for s in range(4)])
    masks, ok = scm.cluster_dataset(list(maps), 3, seed=0, max_pixels=1000)
    assert ok
    for m, t in zip(masks, truths):
        assert ((m == FOREGROUND) == t).mean() > 0.95


# -- Voronoi labels -------------------------------------------------------


def _brute_nearest(shape, seeds):
    region = np.zeros(shape, int)
    for r in range(shape[0]):
        for c in range(shape[1]):
            d = [np.hypot(r - s[0], c - s[1]) for s in seeds]
            region[r, c] = int(np.argmin(d))
    return region


def _brute_labels(shape, seeds, radius):
    region = _brute_nearest(shape, seeds)
    h, w = shape
    dist = lambda r, c, k: np.hypot(r - seeds[k][0], c - seeds[k][1])  # noqa: E731
    ridge = np.zeros(shape, bool)
    for r in range(h):
        for c in range(w):
            for dr, dc in ((0, 1), (1, 0)):
                r2, c2 = r + dr, c + dc
                if r2 >= h or c2 >= w or region[r, c] == region[r2, c2]:
                    continue
                ga = dist(r, c, region[r2, c2]) - dist(r, c, region[r, c])
                gb = dist(r2, c2, region[r, c]) - dist(r2, c2, region[r2, c2])
                if ga <= gb + 1e-12:
                    ridge[r, c] = True
                if gb <= ga + 1e-12:
                    ridge[r2, c2] = True
    labels = np.full(shape, IGNORE)
    for r in range(h):
        for c in range(w):
            near = sum(dist(r, c, k) <= radius for k in range(len(seeds)))
            if ridge[r, c]:
                labels[r, c] = BACKGROUND
            elif near == 1:
                labels[r, c] = FOREGROUND
    return labels


def test_voronoi_matches_brute_force():
    for trial in range(100):
        rng = np.random.default_rng(trial)
        seeds = rng.uniform(0, 31, size=(int(rng.integers(1, 6)), 2))
        region, _ = scm.nearest_seed((32, 32), seeds)
        np.testing.assert_array_equal(region, _brute_nearest((32, 32), seeds))
        labels, _, ok = scm.voronoi_labels(np.zeros((32, 32)), 2.0, seeds=seeds)
        assert ok
        np.testing.assert_array_equal(labels, _brute_labels((32, 32), seeds, 2.0))


def test_voronoi_ridge_between_columns_4_and_5():
    labels, _, _ = scm.voronoi_labels(np.zeros((10, 10)), 2.0, seeds=[(0, 0), (0, 9)])
    ridge_cols = sorted(set(np.nonzero(labels == BACKGROUND)[1]))
    assert ridge_cols == [4, 5]


def test_voronoi_single_seed_has_no_ridge():
    mask = np.zeros((12, 12), np.uint8)
    mask[4:8, 4:8] = 1
    labels, seeds, ok = scm.voronoi_labels(mask, 2.0)
    assert ok and not (labels == BACKGROUND).any()
    np.testing.assert_allclose(seeds, [[5.5, 5.5]])
    rr, cc = np.nonzero(labels == FOREGROUND)
    assert len(rr) > 0 and (np.hypot(rr - 5.5, cc - 5.5) <= 2.0).all()


def test_voronoi_empty_mask_is_all_ignore():
    labels, seeds, ok = scm.voronoi_labels(np.zeros((6, 6)), 2.0)
    assert not ok and len(seeds) == 0 and (labels == IGNORE).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_voronoi_invariants(seed):
    rng = np.random.default_rng(seed)
    mask = np.zeros((24, 24), np.uint8)
    for _ in range(int(rng.integers(1, 6))):
        r, c = rng.integers(2, 22, 2)
        mask[r - 1:r + 2, c - 1:c + 2] = 1
    labels, seeds, ok = scm.voronoi_labels(mask, 2.0)
    assert ok
    region, dist = scm.nearest_seed(mask.shape, seeds)
    # foreground pixels lie within the disk of exactly one seed
    for r, c in zip(*np.nonzero(labels == FOREGROUND)):
        assert (dist[r, c] <= 2.0).sum() == 1
    # ridge pixels border another region and sit near the bisector
    for r, c in zip(*np.nonzero(labels == BACKGROUND)):
        nbrs = [(r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= r + dr < 24 and 0 <= c + dc < 24]
        assert any(region[p] != region[r, c] for p in nbrs)
        d = np.sort(dist[r, c])
        assert d[1] - d[0] < 1.5
    assert set(np.unique(labels)) <= {BACKGROUND, FOREGROUND, IGNORE}

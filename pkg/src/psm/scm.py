"""Prior self-activation maps, semantic clustering and Voronoi labels.

Pipeline per image::

    grads, feats  -> compute_alpha -> compute_psm     (activation map in [0,1])
    psm, raw      -> fuse                             (per-pixel feature vectors)
    fused         -> kmeans -> clusters_to_mask       (pseudo mask)
    pseudo mask   -> voronoi_labels                   (sparse instance-aware labels)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from psm.tensor import ShapeError

log = logging.getLogger(__name__)

BACKGROUND, FOREGROUND, IGNORE = 0, 1, 255


# -- activation maps ------------------------------------------------------


def compute_alpha(grads):
    """Channel weights: spatial mean of dz/dA for each of the K feature maps."""
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim == 4 and g.shape[0] == 1:
        g = g[0]
    if g.ndim != 3 or g.size == 0:
        raise ShapeError(f"compute_alpha expects a nonempty [K,h,w] gradient, got {g.shape}")
    return g.mean(axis=(1, 2))


def weighted_sum(features, alpha):
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 4 and f.shape[0] == 1:
        f = f[0]
    alpha = np.asarray(alpha, dtype=np.float64)
    if f.ndim != 3 or alpha.shape != (f.shape[0],):
        raise ShapeError(f"alpha of shape {alpha.shape} does not match features {f.shape}")
    return np.tensordot(alpha, f, axes=1)


def bilinear_resize(m, shape):
    """Bilinear resize with half-pixel centers (edge-clamped)."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    H, W = shape
    if (h, w) == (H, W):
        return m.copy()
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy, wx = (ys - y0)[:, None], (xs - x0)[None, :]
    top = m[y0][:, x0] * (1 - wx) + m[y0][:, x1] * wx
    bot = m[y1][:, x0] * (1 - wx) + m[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def minmax(m):
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def compute_psm(features, alpha, target_hw, rescale=True):
    """ReLU of the alpha-weighted feature sum, upsampled to ``target_hw``, scaled to [0,1]."""
    cam = np.maximum(weighted_sum(features, alpha), 0.0)
    cam = bilinear_resize(cam, target_hw)
    return minmax(cam) if rescale else cam


def smooth(psm, sigma):
    """Gaussian-smoothed copy of a map; ``sigma = 0`` returns it unchanged."""
    psm = np.asarray(psm)
    return ndimage.gaussian_filter(psm, sigma, mode="nearest") if sigma > 0 else psm


def fuse(psm, raw, beta):
    """Per-pixel features ``(psm, beta*r, beta*g, beta*b)`` as an H x W x 4 array.

    ``raw`` is H x W x 3 (or 3 x H x W) and already scaled to [0, 1].
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 3 and raw.shape[0] == 3 and raw.shape[-1] != 3:
        raw = raw.transpose(1, 2, 0)
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    psm = np.asarray(psm, dtype=np.float64)
    if raw.shape[:2] != psm.shape:
        raise ShapeError(f"fuse: PSM {psm.shape} and raw image {raw.shape[:2]} sizes differ")
    return np.concatenate([psm[..., None], beta * raw], axis=2)


# -- clustering -----------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list
    n_iter: int


def _sqdist(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_once(x, k, rng, max_iter, tol):
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else int(rng.integers(n))
        centroids.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    c = np.array(centroids, dtype=np.float64)
    history = []
    prev = np.inf
    for it in range(max_iter):
        dist = _sqdist(x, c)
        assign = dist.argmin(axis=1)
        obj = float(dist[np.arange(n), assign].sum())
        if history and obj > history[-1] + 1e-9 * max(1.0, abs(history[-1])):
            raise AssertionError("k-means objective increased")
        history.append(obj)
        for j in range(k):
            members = assign == j
            if members.any():
                c[j] = x[members].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its centroid
                far = int(dist[np.arange(n), assign].argmax())
                c[j] = x[far]
                assign[far] = j
        if prev - obj <= tol * max(1.0, abs(obj)):
            break
        prev = obj
    assign, c = _hartigan(x, _sqdist(x, c).argmin(axis=1), k)
    dist = _sqdist(x, c)
    obj = float(dist[np.arange(n), assign].sum())
    if obj > history[-1] + 1e-9 * max(1.0, abs(history[-1])):
        raise AssertionError("k-means objective increased")
    history.append(obj)
    return assign, c, obj, history, it + 1


def _centroids(x, assign, k):
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, assign, x)
    return counts, sums / np.maximum(counts, 1)[:, None]


def _hartigan(x, assign, k, max_moves=None):
    """Single-point moves that lower the objective, best move first.

    Moving x from cluster i (size n_i) to j changes the objective by
    n_j/(n_j+1)|x-c_j|^2 - n_i/(n_i-1)|x-c_i|^2. Lloyd fixed points are
    not always stable under such moves; the result is stable under both.
    """
    n = len(x)
    max_moves = n if max_moves is None else max_moves
    rows = np.arange(n)
    counts, c = _centroids(x, assign, k)
    for _ in range(max_moves):
        d = _sqdist(x, c)
        own = counts[assign]
        with np.errstate(divide="ignore", invalid="ignore"):
            remove = np.where(own > 1, own / (own - 1) * d[rows, assign], -np.inf)
        gain = remove[:, None] - counts / (counts + 1) * d
        gain[rows, assign] = -np.inf
        best = int(gain.argmax())
        i, j = divmod(best, k)
        if not gain[i, j] > 1e-12 * max(1.0, float(d[rows, assign].sum())):
            break
        assign = assign.copy()
        assign[i] = j
        counts, c = _centroids(x, assign, k)
    return assign, c


def kmeans(points, k, seed=0, max_iter=100, tol=1e-8, n_init=1):
    """Lloyd's algorithm with k-means++ seeding and a single-point-move refinement.

    Returns the best of ``n_init`` restarts.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1 or k > len(x):
        raise ValueError(f"k-means needs 1 <= K <= #points, got K={k} for {len(x)} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _kmeans_once(x, k, rng, max_iter, tol)
        if best is None or res[2] < best[2]:
            best = res
    return KMeansResult(*best)


def cluster_pixels(fused, k=3, seed=0, max_pixels=20000, n_init=3):
    """K-means on a uniform pixel subsample, then nearest-centroid labels for every pixel."""
    h, w, c = fused.shape
    flat = fused.reshape(-1, c)
    rng = np.random.default_rng(seed)
    sample = flat if len(flat) <= max_pixels else flat[np.sort(rng.choice(len(flat), max_pixels, replace=False))]
    res = kmeans(sample, k, seed=seed, n_init=n_init)
    labels = _sqdist(flat, res.centroids).argmin(axis=1).reshape(h, w)
    return labels, res


def cluster_roles(assignments, fused, task="segmentation", rule="contrast", middle="background"):
    """Map each cluster id to a pseudo-mask label.

    Which cluster is background is decided by ``rule``:

    * ``"psm"``: the lowest-mean-PSM cluster is background; for
      segmentation the highest-mean-PSM cluster is foreground.
    * ``"contrast"``: the most populous cluster is background; for
      segmentation the cluster whose centroid lies farthest from it in
      fused-feature space is foreground.

    Segmentation labels every other cluster background (or ignore with
    ``middle="ignore"``). Multiclass detection turns the non-background
    clusters into classes ordered by decreasing mean (red - blue), so the
    browner stain is class 1.
    """
    assignments = np.asarray(assignments).ravel()
    fused = np.asarray(fused).reshape(len(assignments), -1)
    ids = [int(i) for i in np.unique(assignments)]
    members = {i: fused[assignments == i] for i in ids}
    centroid = {i: members[i].mean(axis=0) for i in ids}
    # ties fall back to cluster content so relabelling cannot change the result
    content = {i: tuple(centroid[i]) for i in ids}
    if rule == "psm":
        order = sorted(ids, key=lambda i: (centroid[i][0], content[i]))
        background, foreground = order[0], order[-1]
    elif rule == "contrast":
        background = max(ids, key=lambda i: (len(members[i]), content[i]))
        rest = [i for i in ids if i != background] or [background]
        foreground = max(rest, key=lambda i: (float(np.linalg.norm(centroid[i] - centroid[background])), content[i]))
    else:
        raise ValueError(f"unknown foreground rule {rule!r}")
    roles = {i: BACKGROUND for i in ids}
    if task in ("segmentation", "seg"):
        if middle == "ignore":
            roles.update({i: IGNORE for i in ids if i not in (foreground, background)})
        roles[foreground] = FOREGROUND
        return roles
    if task in ("multiclass-detection", "det", "detection"):
        rest = [i for i in ids if i != background]
        redness = {i: centroid[i][1] - centroid[i][3] for i in rest}
        for cls, i in enumerate(sorted(rest, key=lambda i: (-redness[i], content[i])), start=1):
            roles[i] = cls
        return roles
    raise ValueError(f"unknown clustering task {task!r}")


def apply_roles(assignments, roles):
    assignments = np.asarray(assignments)
    mask = np.zeros(assignments.shape, np.uint8)
    for cid, label in roles.items():
        mask[assignments == cid] = label
    return mask


def clusters_to_mask(assignments, fused, task="segmentation", rule="contrast", middle="background"):
    """Pseudo mask from a K-cluster pixel partition (see ``cluster_roles``).

    Returns ``(mask, ok)``; ``ok`` is False for a degenerate single-cluster
    partition, which yields an all-background mask.
    """
    assignments = np.asarray(assignments)
    if len(np.unique(assignments)) < 2:
        log.warning("degenerate clustering (single cluster); pseudo mask is all background")
        return np.zeros(assignments.shape, np.uint8), False
    return apply_roles(assignments, cluster_roles(assignments, fused, task, rule, middle)), True


def cluster_dataset(fused_maps, k=3, seed=0, max_pixels=20000, task="segmentation", rule="contrast",
                    middle="background", n_init=3):
    """Fit K-means on a pixel sample pooled over all images; label every image.

    Cluster roles are decided once on the pooled sample so class ids mean
    the same thing in every image. Returns ``(masks, ok)``.
    """
    flat = np.concatenate([f.reshape(-1, f.shape[-1]) for f in fused_maps])
    rng = np.random.default_rng(seed)
    pick = np.arange(len(flat)) if len(flat) <= max_pixels else np.sort(rng.choice(len(flat), max_pixels, replace=False))
    res = kmeans(flat[pick], k, seed=seed, n_init=n_init)
    if len(np.unique(res.assignments)) < 2:
        log.warning("degenerate clustering (single cluster); pseudo masks are all background")
        return [np.zeros(f.shape[:2], np.uint8) for f in fused_maps], False
    roles = cluster_roles(res.assignments, flat[pick], task, rule, middle)
    masks = []
    for f in fused_maps:
        lab = _sqdist(f.reshape(-1, f.shape[-1]), res.centroids).argmin(axis=1).reshape(f.shape[:2])
        masks.append(apply_roles(lab, roles))
    return masks, True


# -- Voronoi labels -------------------------------------------------------


def component_seeds(mask):
    """Centroids (row, col) of the 4-connected foreground components of ``mask``."""
    fg = (np.asarray(mask) > 0) & (np.asarray(mask) != IGNORE)
    lab, n = ndimage.label(fg)
    if n == 0:
        return np.zeros((0, 2))
    return np.array(ndimage.center_of_mass(fg, lab, range(1, n + 1)), dtype=np.float64)


def nearest_seed(shape, seeds):
    """Index of the nearest seed for every pixel (lowest index wins ties)."""
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]]
    d2 = (rr[..., None] - seeds[:, 0]) ** 2 + (cc[..., None] - seeds[:, 1]) ** 2
    return d2.argmin(axis=2), np.sqrt(d2)


def ridge_pixels(region, dist):
    """Discrete Voronoi ridge.

    Each 4-adjacent pixel pair lying in different regions marks whichever
    member is closer to the bisector (both on a tie), so the ridge stays
    within one pixel of the continuous boundary.
    """
    h, w = region.shape
    ridge = np.zeros((h, w), bool)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    own = dist[rows, cols, region]
    for axis in (0, 1):
        a = (slice(None, -1), slice(None)) if axis == 0 else (slice(None), slice(None, -1))
        b = (slice(1, None), slice(None)) if axis == 0 else (slice(None), slice(1, None))
        ra, rb = region[a], region[b]
        differ = ra != rb
        # signed gap to the other region for each member of the pair
        ga = dist[a][np.arange(ra.shape[0])[:, None], np.arange(ra.shape[1])[None, :], rb] - own[a]
        gb = dist[b][np.arange(rb.shape[0])[:, None], np.arange(rb.shape[1])[None, :], ra] - own[b]
        ridge[a] |= differ & (ga <= gb + 1e-12)
        ridge[b] |= differ & (gb <= ga + 1e-12)
    return ridge


def voronoi_labels(mask, seed_disk_radius=2.0, seeds=None):
    """Sparse labels: ridge -> 0, seed disks -> 1, everything else -> 255.

    Returns ``(labels, seeds, ok)``.
    """
    mask = np.asarray(mask)
    if seeds is None:
        seeds = component_seeds(mask)
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 2)
    labels = np.full(mask.shape, IGNORE, np.uint8)
    if len(seeds) == 0:
        log.warning("no foreground components; Voronoi map is all-ignore")
        return labels, seeds, False
    region, dist = nearest_seed(mask.shape, seeds)
    ridge = ridge_pixels(region, dist) if len(seeds) > 1 else np.zeros(mask.shape, bool)
    within = (dist <= seed_disk_radius).sum(axis=2)
    labels[(within == 1) & ~ridge] = FOREGROUND
    labels[ridge] = BACKGROUND
    return labels, seeds, True

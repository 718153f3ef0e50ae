"""Training and inference for the segmentation and detection networks."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from psm import tensor as T
from psm.networks import Adam, ScoreNet
from psm.scm import BACKGROUND, FOREGROUND, IGNORE

log = logging.getLogger(__name__)


class SupervisionError(ValueError):
    """Raised when the labels contain nothing to learn from."""


def _as_batch(a):
    a = np.asarray(a)
    return a[None] if a.ndim == 2 else a


def loss_partial_ce(pred, vor, sg, lam=0.5):
    """Voronoi partial cross-entropy plus background-only pseudo-mask term.

    ``pred`` is a Tensor of foreground probabilities shaped [N,1,H,W] (or
    [H,W]); ``vor`` and ``sg`` are label maps of matching spatial shape.
    The first term averages over Voronoi-labelled pixels (0 or 1), the
    second over pseudo-mask background pixels; ignore pixels contribute
    nothing.
    """
    vor, sg = _as_batch(vor), _as_batch(sg)
    shape = pred.shape
    if int(np.prod(shape)) != vor.size or vor.shape != sg.shape:
        raise T.ShapeError(f"loss_partial_ce: pred {shape}, vor {vor.shape}, sg {sg.shape}")
    vor = vor.reshape(shape)
    sg = sg.reshape(shape)
    pos = vor == FOREGROUND
    neg = vor == BACKGROUND
    bg = sg == BACKGROUND
    n_vor = int(pos.sum() + neg.sum())
    n_bg = int(bg.sum())
    if n_vor == 0 and n_bg == 0:
        raise SupervisionError("no labelled pixels in either the Voronoi map or the pseudo mask")
    dtype = pred.dtype
    w_pos = np.zeros(shape, dtype)
    w_neg = np.zeros(shape, dtype)
    if n_vor:
        w_pos[pos] = lam / n_vor
        w_neg[neg] = lam / n_vor
    if n_bg:
        w_neg[bg] += 1.0 / n_bg
    log_p = T.log(pred)
    log_q = T.log(T.sub(1.0, pred))
    return -(T.tsum(T.mul(log_p, w_pos)) + T.tsum(T.mul(log_q, w_neg)))


def loss_dense_ce(pred, mask, n_classes):
    """Per-class binary cross-entropy on non-ignore pixels.

    ``pred`` is [N,C,H,W]; class ``c`` (1-based in ``mask``) is channel c-1.
    """
    mask = _as_batch(mask)
    n, c, h, w = pred.shape
    if c != n_classes or mask.shape != (n, h, w):
        raise T.ShapeError(f"loss_dense_ce: pred {pred.shape}, mask {mask.shape}, classes {n_classes}")
    valid = mask != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise SupervisionError("all pixels are ignore; nothing to supervise")
    target = np.stack([(mask == k + 1) for k in range(c)], axis=1)
    scale = 1.0 / (n_valid * c)
    w_pos = (target & valid[:, None]).astype(pred.dtype) * scale
    w_neg = (~target & valid[:, None]).astype(pred.dtype) * scale
    return -(T.tsum(T.mul(T.log(pred), w_pos)) + T.tsum(T.mul(T.log(T.sub(1.0, pred)), w_neg)))


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-4
    batch_size: int = 4
    seed: int = 0
    lam: float = 0.5


def _fit(net, n_items, loss_fn, cfg):
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params.values(), lr=cfg.lr)
    net.train()
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_items)
        total, count = 0.0, 0
        for start in range(0, n_items, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            net.zero_grad()
            loss = loss_fn(idx)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        log.info("epoch %d loss %.6f", epoch + 1, curve[-1])
    net.eval()
    return curve


def train_segmentation(net: ScoreNet, images, vors, sgs, cfg: TrainConfig):
    """Fit a one-channel ScoreNet with the Voronoi partial loss. Returns the loss curve."""
    images = np.asarray(images)
    vors, sgs = np.asarray(vors), np.asarray(sgs)
    if len(images) == 0:
        raise ValueError("segmentation training needs at least one image")
    if not (len(images) == len(vors) == len(sgs)):
        raise ValueError("images, Voronoi maps and pseudo masks are not aligned")

    def loss_fn(idx):
        return loss_partial_ce(net.score_forward(images[idx]), vors[idx], sgs[idx], cfg.lam)

    return _fit(net, len(images), loss_fn, cfg)


def train_detection(net: ScoreNet, images, masks, cfg: TrainConfig):
    """Fit a C-channel ScoreNet on class-labelled pseudo masks. Returns the loss curve."""
    images, masks = np.asarray(images), np.asarray(masks)
    if len(images) == 0:
        raise ValueError("detection training needs at least one image")
    if len(images) != len(masks):
        raise ValueError("images and masks are not aligned")
    if not (masks != IGNORE).any():
        raise SupervisionError("all pseudo masks are ignore")
    for k in range(1, net.n_classes + 1):
        if not (masks == k).any():
            log.warning("class %d absent from every pseudo mask; its head only sees negatives", k)

    def loss_fn(idx):
        return loss_dense_ce(net.score_forward(images[idx]), masks[idx], net.n_classes)

    return _fit(net, len(images), loss_fn, cfg)


def predict(net: ScoreNet, images, batch_size=16):
    """Score maps [N,C,H,W] in inference mode."""
    net.eval()
    out = [net.score_forward(np.asarray(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


# -- post-processing ---------------------------------------------------------


def local_extremum_detect(score, window_radius=3, min_score=0.3, tie_break=False):
    """Pixels strictly greater than every other pixel in their square window.

    Returns a list of ``(row, col, score)``. With ``tie_break`` a plateau
    yields its first pixel in raster order instead of nothing.
    """
    if window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    p = np.asarray(score, dtype=np.float64)
    size = 2 * window_radius + 1
    ring = np.ones((size, size), bool)
    ring[window_radius, window_radius] = False
    kw = dict(mode="constant", cval=-np.inf)
    if tie_break:
        before = np.zeros_like(ring)
        before[:window_radius] = True
        before[window_radius, :window_radius] = True
        after = ring & ~before
        peak = (p > ndimage.maximum_filter(p, footprint=before, **kw)) & (
            p >= ndimage.maximum_filter(p, footprint=after, **kw))
    else:
        peak = p > ndimage.maximum_filter(p, footprint=ring, **kw)
    if min_score is not None:
        peak &= p >= min_score
    rows, cols = np.nonzero(peak)
    return [(int(r), int(c), float(p[r, c])) for r, c in zip(rows, cols)]


def detect_points(scores, window_radius=3, min_score=0.3, smooth_sigma=1.5):
    """Class-labelled points ``(row, col, class, score)`` from a [C,H,W] score map.

    Each class map is Gaussian-smoothed (saturated blobs otherwise form
    plateaus), searched for local extrema, and a point is dropped when a
    higher-scoring point of another class lies within ``window_radius``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    cands = []
    for k, m in enumerate(scores, start=1):
        if smooth_sigma:
            m = ndimage.gaussian_filter(m, smooth_sigma, mode="nearest")
        cands += [(r, c, k, s) for r, c, s in local_extremum_detect(m, window_radius, min_score)]
    keep = []
    for r, c, k, s in cands:
        beaten = any(
            k2 != k and max(abs(r - r2), abs(c - c2)) <= window_radius and (s2, -k2) > (s, -k)
            for r2, c2, k2, s2 in cands
        )
        if not beaten:
            keep.append((r, c, k, s))
    return sorted(keep)


def segment_infer(score, threshold=0.5, min_area=4):
    """Binarize, label 4-connected components and drop those below ``min_area``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    fg = np.asarray(score) > threshold
    lab, n = ndimage.label(fg)
    if n == 0:
        return np.zeros(fg.shape, np.int32)
    areas = np.bincount(lab.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    remap = np.zeros(n + 1, np.int32)
    remap[keep] = np.arange(1, keep.sum() + 1)
    return remap[lab]

"""Segmentation and detection metrics.

Conventions for empty inputs (so comparisons are deterministic):

* ``pixel_iou_f1``: both masks empty -> (1.0, 1.0).
* ``match_points``: a ratio with a zero denominator is 1.0, so empty
  prediction and empty ground truth give P = R = F1 = 1, and an empty
  prediction against nonempty ground truth gives P = 1, R = 0, F1 = 0.
* ``aji`` / ``dice_object``: empty ground truth raises ``ValueError``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


def _ratio(num, den):
    return num / den if den > 0 else 1.0


def pixel_counts(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def iou_f1_from_counts(tp, fp, fn):
    return _ratio(tp, tp + fp + fn), _ratio(2 * tp, 2 * tp + fp + fn)


def pixel_iou_f1(pred, gt):
    """IoU = TP/(TP+FP+FN) and F1 = 2TP/(2TP+FP+FN) over foreground pixels."""
    return iou_f1_from_counts(*pixel_counts(pred, gt))


def _overlaps(pred, gt):
    """Intersection table: rows are gt instances, columns pred instances, both in raster order."""
    pred, gt = np.asarray(pred, np.int64), np.asarray(gt, np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"instance mask shapes differ: {pred.shape} vs {gt.shape}")
    gt_ids, g_index = _raster_order(gt)
    pred_ids, p_index = _raster_order(pred)
    g_area = np.bincount(g_index[gt > 0], minlength=len(gt_ids))
    p_area = np.bincount(p_index[pred > 0], minlength=len(pred_ids))
    both = (gt > 0) & (pred > 0)
    inter = np.zeros((len(gt_ids), len(pred_ids)), np.int64)
    np.add.at(inter, (g_index[both], p_index[both]), 1)
    return inter, g_area, p_area


def _raster_order(labels):
    """Instance ids ordered by first pixel in raster order, plus a per-pixel index map.

    Ordering by position rather than id keeps argmax tie-breaks independent of labelling.
    """
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    ids = ids[np.argsort(first)]
    index = np.full(labels.shape, -1, np.int64)
    for k, i in enumerate(ids):
        index[labels == i] = k
    return ids, index


def aji(pred, gt):
    """Aggregated Jaccard Index of two instance label maps (0 = background)."""
    inter, g_area, p_area = _overlaps(pred, gt)
    if len(g_area) == 0:
        raise ValueError("AJI is undefined for ground truth without instances")
    used = np.zeros(len(p_area), bool)
    c = u = 0
    for g in range(len(g_area)):
        if len(p_area) == 0 or inter[g].max() == 0:
            u += g_area[g]
            continue
        union = g_area[g] + p_area - inter[g]
        iou = inter[g] / union
        j = int(iou.argmax())
        c += inter[g, j]
        u += union[j]
        used[j] = True
    u += p_area[~used].sum()
    return float(c / u)


def _one_sided_dice(inter, a_area, b_area):
    if len(a_area) == 0:
        return 0.0
    scores = []
    for i in range(len(a_area)):
        if len(b_area) == 0 or inter[i].max() == 0:
            scores.append(0.0)
            continue
        j = int(inter[i].argmax())
        scores.append(2 * inter[i, j] / (a_area[i] + b_area[j]))
    return float(np.mean(scores))


def dice_object(pred, gt):
    """Symmetric object-level Dice.

    Mean Dice of each gt object with its most-overlapping prediction,
    averaged with the same quantity computed from the prediction side.
    """
    inter, g_area, p_area = _overlaps(pred, gt)
    if len(g_area) == 0:
        raise ValueError("object Dice is undefined for ground truth without instances")
    return 0.5 * (_one_sided_dice(inter, g_area, p_area) + _one_sided_dice(inter.T, p_area, g_area))


# -- point matching --------------------------------------------------------


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (gt index, pred index, distance)
    unmatched_gt: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fp(self):
        return len(self.unmatched_pred)

    @property
    def fn(self):
        return len(self.unmatched_gt)


def _candidates(pred, gt, radius):
    cands = []
    for gi, g in enumerate(gt):
        for pi, p in enumerate(pred):
            if int(g[2]) != int(p[2]):
                continue
            d = float(np.hypot(g[0] - p[0], g[1] - p[1]))
            if d <= radius:
                cands.append((d, gi, pi))
    return cands


def _optimal_pairs(cands, n_gt, n_pred):
    """Maximum-cardinality one-to-one matching (ties: smallest total distance)."""
    from scipy.optimize import linear_sum_assignment

    if not cands:
        return []
    big = 1e6
    cost = np.full((n_gt, n_pred), big)
    for d, gi, pi in cands:
        cost[gi, pi] = -big + d
    rows, cols = linear_sum_assignment(cost)
    return sorted((gi, pi, float(cost[gi, pi] + big)) for gi, pi in zip(rows, cols) if cost[gi, pi] < 0)


def match_points(pred, gt, radius=6.0, optimal=False):
    """One-to-one matching of points ``(row, col, class, ...)`` of equal class.

    Greedy by ascending distance (ties by gt then pred coordinates) unless
    ``optimal`` is set. Returns ``(MatchResult, precision, recall, f1)``.
    """
    if radius <= 0:
        raise ValueError("match radius must be positive")
    pred, gt = list(pred), list(gt)
    cands = _candidates(pred, gt, radius)
    if optimal:
        pairs = _optimal_pairs(cands, len(gt), len(pred))
    else:
        pairs, g_used, p_used = [], set(), set()
        # ties broken on coordinates, so the matched pairs do not depend on input order
        key = lambda c: (c[0], tuple(gt[c[1]][:3]), tuple(pred[c[2]][:3]), c[1], c[2])
        for d, gi, pi in sorted(cands, key=key):
            if gi in g_used or pi in p_used:
                continue
            g_used.add(gi)
            p_used.add(pi)
            pairs.append((gi, pi, d))
    mg = {p[0] for p in pairs}
    mp = {p[1] for p in pairs}
    res = MatchResult(pairs, [i for i in range(len(gt)) if i not in mg], [i for i in range(len(pred)) if i not in mp])
    return (res, *prf_from_counts(res.tp, res.fp, res.fn))


def prf_from_counts(tp, fp, fn):
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return p, r, _ratio(2 * tp, 2 * tp + fp + fn)


def brute_force_max_matching(pred, gt, radius):
    """Exhaustive maximum one-to-one matching count; for tiny sets only."""
    ok = {(gi, pi) for _, gi, pi in _candidates(pred, gt, radius)}
    best = 0
    small, large = (gt, pred) if len(gt) <= len(pred) else (pred, gt)
    swap = small is pred
    for perm in itertools.permutations(range(len(large)), len(small)):
        n = sum(((j, i) if swap else (i, j)) in ok for i, j in enumerate(perm))
        best = max(best, n)
    return best


def counting_errors(preds, gts, positive=1, negative=2):
    """Mean absolute per-image count error for the positive and negative class."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} ground-truth sets")
    if not preds:
        return 0.0, 0.0

    def count(pts, cls):
        return sum(1 for p in pts if int(p[2]) == cls)

    mp = np.mean([abs(count(p, positive) - count(g, positive)) for p, g in zip(preds, gts)])
    mn = np.mean([abs(count(p, negative) - count(g, negative)) for p, g in zip(preds, gts)])
    return float(mp), float(mn)

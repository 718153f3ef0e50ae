"""Overlay rendering of pipeline artifacts on their base image."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from psm.scm import BACKGROUND, FOREGROUND, IGNORE
from psm.synth import load_label_png, read_points_csv
from psm.tensor import ShapeError, load_psmt

RED = (255, 0, 0)
GREEN = (0, 255, 0)
CLASS_COLORS = {1: RED, 2: GREEN}
RIDGE_COLOR = (255, 255, 0)
SEED_COLOR = (255, 0, 255)
PSM_OPACITY = 0.6
MASK_OPACITY = 0.45

# distinct tints for labels 1.. (cycled for instance masks)
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (0, 128, 128), (170, 110, 40),
], dtype=np.float64)


def heat_ramp(v):
    """Black-red-yellow-white ramp for values in [0, 1]; returns [...,3] floats in [0, 255]."""
    v = np.clip(np.asarray(v, np.float64), 0.0, 1.0)
    r = np.clip(3 * v, 0, 1)
    g = np.clip(3 * v - 1, 0, 1)
    b = np.clip(3 * v - 2, 0, 1)
    return np.stack([r, g, b], axis=-1) * 255.0


def _check(shape, base):
    if tuple(shape) != base.shape[:2]:
        raise ShapeError(f"artifact size {tuple(shape)} does not match base image {base.shape[:2]}")


def overlay_psm(base, psm):
    """Heat map blended with opacity proportional to the map value (0 is fully transparent)."""
    psm = np.asarray(psm, np.float64)
    _check(psm.shape, base)
    a = PSM_OPACITY * np.clip(psm, 0, 1)[..., None]
    return _to_u8(base * (1 - a) + heat_ramp(psm) * a)


def overlay_mask(base, labels):
    """Tint every nonzero, non-ignore label; background and ignore stay untouched."""
    labels = np.asarray(labels)
    _check(labels.shape, base)
    out = base.astype(np.float64).copy()
    sel = (labels != 0) & (labels != IGNORE)
    tint = PALETTE[(labels[sel] - 1) % len(PALETTE)]
    out[sel] = (1 - MASK_OPACITY) * out[sel] + MASK_OPACITY * tint
    return _to_u8(out)


def overlay_voronoi(base, labels):
    """Ridge (background-labelled) pixels in yellow, seed pixels in magenta, ignore untouched."""
    labels = np.asarray(labels)
    _check(labels.shape, base)
    out = base.copy()
    out[labels == BACKGROUND] = RIDGE_COLOR
    out[labels == FOREGROUND] = SEED_COLOR
    return out


def overlay_points(base, points, radius=1):
    """Dots (a plus of the given arm length) at each point: red for class 1, green for class 2."""
    out = base.copy()
    h, w = base.shape[:2]
    for p in points:
        r, c, k = int(p[0]), int(p[1]), int(p[2])
        if not (0 <= r < h and 0 <= c < w):
            raise ShapeError(f"point ({r}, {c}) lies outside the {h}x{w} base image")
        color = CLASS_COLORS.get(k, (255, 255, 255))
        for dr, dc in [(0, 0)] + [(s * i, 0) for i in range(1, radius + 1) for s in (-1, 1)] + \
                [(0, s * i) for i in range(1, radius + 1) for s in (-1, 1)]:
            if 0 <= r + dr < h and 0 <= c + dc < w:
                out[r + dr, c + dc] = color
    return out


def _to_u8(a):
    return np.clip(np.rint(a), 0, 255).astype(np.uint8)


def render(artifact, kind, base, out=None):
    """Render ``artifact`` (a path) of the given kind over the RGB ``base`` image path.

    ``kind`` is one of psm (PSMT map), mask (label PNG), voronoi (label
    PNG) or points (CSV). Writes a PNG when ``out`` is given and returns
    the uint8 RGB array.
    """
    base_img = np.asarray(Image.open(base).convert("RGB"), dtype=np.uint8)
    if kind == "psm":
        img = overlay_psm(base_img, load_psmt(artifact))
    elif kind == "mask":
        img = overlay_mask(base_img, load_label_png(artifact))
    elif kind == "voronoi":
        img = overlay_voronoi(base_img, load_label_png(artifact))
    elif kind == "points":
        img = overlay_points(base_img, read_points_csv(artifact))
    else:
        raise ValueError(f"unknown render kind {kind!r}")
    if out is not None:
        Image.fromarray(img, "RGB").save(Path(out))
    return img

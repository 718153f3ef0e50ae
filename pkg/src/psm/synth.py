"""Deterministic generator of histology-like images with ground truth.

Cells are rotated ellipses with softened borders on a pale, textured
background. Two stain classes mimic immunohistochemistry: class 1
("positive", brown) and class 2 ("negative", purple-blue).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

POSITIVE, NEGATIVE = 1, 2


@dataclass
class SynthConfig:
    size: int = 64
    count_range: tuple[int, int] = (6, 12)
    radius_range: tuple[float, float] = (3.0, 5.5)
    positive_fraction: float = 0.5
    background_rgb: tuple[float, float, float] = (0.92, 0.86, 0.88)
    positive_rgb: tuple[float, float, float] = (0.55, 0.33, 0.18)
    negative_rgb: tuple[float, float, float] = (0.36, 0.28, 0.58)
    noise: float = 0.04
    edge_softness: float = 0.6
    min_gap: float = 2.0
    overlap: str = "none"
    contrast_floor: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.radius_range[0] < 2:
            raise ValueError("cell radius must be >= 2")
        if self.overlap not in ("none", "allow"):
            raise ValueError(f"unknown overlap policy {self.overlap!r}")
        bg = np.mean(self.background_rgb)
        for name in ("positive_rgb", "negative_rgb"):
            if abs(bg - np.mean(getattr(self, name))) < self.contrast_floor:
                raise ValueError(f"{name} is within the contrast floor of the background")


@dataclass
class SynthImage:
    image: np.ndarray  # H x W x 3 uint8
    instances: np.ndarray  # H x W uint16, 0 = background
    points: list = field(default_factory=list)  # (row, col, class)
    seed: int = 0


def _ellipse_inside(rr, cc, cy, cx, a, b, theta):
    dy, dx = rr - cy, cc - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def generate_image(cfg: SynthConfig, seed: int) -> SynthImage:
    rng = np.random.default_rng(seed)
    n = cfg.size
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    instances = np.zeros((n, n), np.uint16)
    alpha = np.zeros((n, n))
    color = np.zeros((n, n, 3))
    points = []
    target = int(rng.integers(cfg.count_range[0], cfg.count_range[1] + 1))
    placed, attempts = [], 0
    while len(placed) < target and attempts < 400 * max(target, 1):
        attempts += 1
        a = rng.uniform(*cfg.radius_range)
        b = a * rng.uniform(0.7, 1.0)
        theta = rng.uniform(0, np.pi)
        margin = a + 1
        cy, cx = rng.uniform(margin, n - 1 - margin, size=2)
        if cfg.overlap == "none" and any(
            np.hypot(cy - py, cx - px) < a + pa + cfg.min_gap for py, px, pa in placed
        ):
            continue
        placed.append((cy, cx, a))
        rho = _ellipse_inside(rr, cc, cy, cx, a, b, theta)
        cls = POSITIVE if rng.random() < cfg.positive_fraction else NEGATIVE
        base = np.array(cfg.positive_rgb if cls == POSITIVE else cfg.negative_rgb)
        shade = base * rng.uniform(0.9, 1.1)
        soft = np.clip((1.0 - rho) / (cfg.edge_softness / a) + 0.5, 0.0, 1.0)
        take = soft > alpha
        alpha = np.where(take, soft, alpha)
        color[take] = shade
        inside = rho <= 1.0
        if cfg.overlap == "none":
            inside &= instances == 0
        instances[inside] = len(placed)
        points.append((int(round(cy)), int(round(cx)), cls))
    bg = np.array(cfg.background_rgb)
    img = (1 - alpha[..., None]) * bg + alpha[..., None] * color
    # low-frequency stain variation plus pixel noise
    coarse = rng.normal(0, cfg.noise, size=(n // 8, n // 8, 3)).repeat(8, 0).repeat(8, 1)
    img = img + 0.5 * coarse + rng.normal(0, cfg.noise, size=img.shape)
    img = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return SynthImage(img, instances, points, seed)


def image_seeds(seed: int, n_images: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(n_images)
    return [int(c.generate_state(1)[0]) for c in children]


def write_points_csv(path, points):
    lines = ["row,col,class,score"]
    for p in points:
        score = p[3] if len(p) > 3 else 1.0
        lines.append(f"{int(p[0])},{int(p[1])},{int(p[2])},{float(score):.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_points_csv(path):
    rows = Path(path).read_text().splitlines()[1:]
    out = []
    for line in rows:
        if line.strip():
            r, c, k, s = line.split(",")
            out.append((int(r), int(c), int(k), float(s)))
    return out


def generate_dataset(cfg: SynthConfig, n_images: int, out_dir) -> Path:
    """Write images, instance masks, point CSVs and ``manifest.txt`` under ``out_dir``."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    out = Path(out_dir)
    for sub in ("images", "gt/instances", "gt/points"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = ["# name image instances points seed"]
    for i, s in enumerate(image_seeds(cfg.seed, n_images)):
        sample = generate_image(cfg, s)
        name = f"img_{i:04d}"
        Image.fromarray(sample.image, "RGB").save(out / "images" / f"{name}.png")
        save_label_png(out / "gt/instances" / f"{name}.png", sample.instances, bits=16)
        write_points_csv(out / "gt/points" / f"{name}.csv", sample.points)
        lines.append(f"{name} images/{name}.png gt/instances/{name}.png gt/points/{name}.csv {s}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def save_label_png(path, labels, bits=8):
    if bits == 8:
        if labels.max(initial=0) > 255:
            raise ValueError("labels exceed 8-bit range")
        Image.fromarray(labels.astype(np.uint8), "L").save(path)
    else:
        Image.fromarray(labels.astype(np.uint16)).save(path)


def load_label_png(path):
    return np.array(Image.open(path)).astype(np.int64)


def load_image(path):
    """RGB uint8 -> float32 H x W x 3 in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0

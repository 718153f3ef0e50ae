"""Self-supervised proxy tasks for the activation network.

Two objectives on embeddings compared with the Manhattan distance:

* similarity: ``diff(z_anchor, z_positive)``
* contrastive: ``diff(z_anchor, z_positive) - diff(z_anchor, z_negative)``

The positive view is the anchor rotated by a multiple of 90 degrees, so it
is lossless. The negative is another image drawn uniformly from the rest
of the dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from psm import tensor as T
from psm.networks import ActivationNet, Adam
from psm.tensor import Tensor

log = logging.getLogger(__name__)

TASKS = ("similarity", "contrastive")


def diff(a, b):
    """Manhattan distance between two embeddings (Tensor or array)."""
    if a.shape != b.shape:
        raise T.ShapeError(f"diff: embedding shapes {a.shape} and {b.shape} differ")
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return T.tsum(T.absolute(T.sub(a, b)))
    return float(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)).sum())


def _normalize(z):
    # L1 normalisation, optional
    if isinstance(z, Tensor):
        n = float(np.abs(z.data).sum()) + 1e-12
        return T.mul(z, 1.0 / n)
    return np.asarray(z) / (np.abs(z).sum() + 1e-12)


def loss_similarity(z_l, z_r, normalize=False):
    if normalize:
        z_l, z_r = _normalize(z_l), _normalize(z_r)
    return diff(z_l, z_r)


def loss_contrastive(z_l, z_r, z_n, margin=None, normalize=False):
    """Literal difference of distances; ``margin`` turns it into a hinge."""
    if normalize:
        z_l, z_r, z_n = _normalize(z_l), _normalize(z_r), _normalize(z_n)
    loss = diff(z_l, z_r) - diff(z_l, z_n)
    if margin is None:
        return loss
    if isinstance(loss, Tensor):
        return T.relu(T.add(loss, float(margin)))
    return max(0.0, loss + margin)


def rotate90(image, k):
    """Rotate a CHW (or HW) array by ``k`` quarter turns in the spatial plane."""
    return np.ascontiguousarray(np.rot90(image, k, axes=(-2, -1)))


@dataclass
class ProxyBatch:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray | None
    anchor_index: int
    negative_index: int | None
    quarter_turns: int


def make_batch(images, index, rng, with_negative=True):
    k = int(rng.integers(1, 4))
    anchor = images[index]
    neg_idx = None
    if with_negative:
        neg_idx = int(rng.integers(0, len(images) - 1))
        if neg_idx >= index:
            neg_idx += 1
    return ProxyBatch(anchor, rotate90(anchor, k), images[neg_idx] if neg_idx is not None else None,
                      index, neg_idx, k)


@dataclass
class ProxyConfig:
    task: str = "similarity"
    epochs: int = 5
    lr: float = 1e-4
    seed: int = 0
    margin: float | None = None
    normalize: bool = False


def train_proxy(net: ActivationNet, images, cfg: ProxyConfig):
    """Train ``net`` in place on CHW float images; returns per-epoch mean losses."""
    if cfg.task not in TASKS:
        raise ValueError(f"unknown proxy task {cfg.task!r}")
    if len(images) == 0:
        raise ValueError("proxy training needs a nonempty dataset")
    contrastive = cfg.task == "contrastive"
    if contrastive and len(images) < 2:
        raise ValueError("contrastive proxy task needs at least 2 images")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params.values(), lr=cfg.lr)
    net.train()
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for idx in order:
            batch = make_batch(images, int(idx), rng, with_negative=contrastive)
            net.zero_grad()
            z_l = net.forward_embed(batch.anchor[None])
            z_r = net.forward_embed(batch.positive[None])
            if contrastive:
                z_n = net.forward_embed(batch.negative[None])
                loss = loss_contrastive(z_l, z_r, z_n, cfg.margin, cfg.normalize)
            else:
                loss = loss_similarity(z_l, z_r, cfg.normalize)
            loss.backward()
            opt.step()
            total += loss.item()
        curve.append(total / len(images))
        log.info("proxy %s epoch %d loss %.6f", cfg.task, epoch + 1, curve[-1])
    net.eval()
    return curve

"""Activation network, scoring network, optimizer and checkpoints.

``ActivationNet`` is a four-block convolutional encoder with an embedding
head; any block output can be tapped for its gradient. ``ScoreNet`` is a
small encoder-decoder with skip connections that emits per-class
probabilities at input resolution.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

from psm import tensor as T
from psm.tensor import Tensor

OUTPUT_EPS = 1e-6


class Module:
    """Holds named parameters (trainable) and buffers (running statistics)."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.training = True

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    def state_dict(self):
        state = OrderedDict((k, v.data) for k, v in self.params.items())
        state.update(self.buffers)
        return state

    def load_state_dict(self, state):
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)
        for k, b in self.buffers.items():
            b[...] = state[k]

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    # -- building blocks --------------------------------------------------

    def _conv(self, name, rng, cin, cout, k, bias=False):
        fan_in = cin * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
        self.params[f"{name}.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def _bn(self, name, c):
        self.params[f"{name}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.buffers[f"{name}.running_var"] = np.ones(c, np.float32)

    def _conv_bn_relu(self, name, x):
        p = self.params
        y = T.conv2d(x, p[f"{name}.conv.weight"], p.get(f"{name}.conv.bias"), padding=1)
        y = T.batch_norm(y, p[f"{name}.bn.gamma"], p[f"{name}.bn.beta"],
                         self.buffers[f"{name}.bn.running_mean"], self.buffers[f"{name}.bn.running_var"],
                         training=self.training)
        return T.relu(y)


def _check_hw(image, multiple=8):
    if image.ndim != 4 or image.shape[2] % multiple or image.shape[3] % multiple:
        raise T.ShapeError(f"expected [N,3,H,W] with H, W multiples of {multiple}, got {image.shape}")


class ActivationNet(Module):
    """Four conv-bn-relu blocks (max-pool between them) and a linear embedding head."""

    def __init__(self, channels=(3, 16, 32, 64, 64), embed_dim=64, seed=0):
        super().__init__()
        if len(channels) != 5:
            raise ValueError("ActivationNet needs exactly 4 blocks (5 channel entries)")
        self.channels = tuple(channels)
        self.embed_dim = embed_dim
        rng = np.random.default_rng(seed)
        for i in range(4):
            self._conv(f"block{i + 1}.conv", rng, channels[i], channels[i + 1], 3)
            self._bn(f"block{i + 1}.bn", channels[i + 1])
        w = rng.normal(0.0, np.sqrt(1.0 / channels[-1]), size=(embed_dim, channels[-1]))
        self.params["head.weight"] = Tensor(w.astype(np.float32), requires_grad=True)
        self.params["head.bias"] = Tensor(np.zeros(embed_dim, np.float32), requires_grad=True)

    def block(self, i, x):
        if i > 1:
            x = T.max_pool2d(x)
        return self._conv_bn_relu(f"block{i}", x)

    def features(self, image, upto=4):
        """Return the post-activation outputs of blocks 1..``upto``."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        feats = []
        for i in range(1, upto + 1):
            x = self.block(i, x)
            feats.append(x)
        return feats

    def forward_from(self, feat, depth):
        """Embedding computed from the block-``depth`` output onwards."""
        x = feat if isinstance(feat, Tensor) else Tensor(feat)
        for i in range(depth + 1, 5):
            x = self.block(i, x)
        return self.head(x)

    def head(self, feat4):
        pooled = T.global_avg_pool(feat4)
        return T.linear(pooled, self.params["head.weight"], self.params["head.bias"])

    def forward_embed(self, image):
        """Embed an [N,3,H,W] image batch into [N, embed_dim]."""
        _check_hw(image)
        return self.head(self.features(image)[-1])

    def forward_with_taps(self, image, depth, reduce="sum"):
        """Forward one image, tapping block ``depth`` for its gradient.

        Returns ``(z, A)``: the scalar reduction of the embedding and the
        tapped [1,K,h,w] block output. Call ``z.backward()`` and read
        ``A.grad`` for dz/dA.
        """
        if depth not in (1, 2, 3, 4):
            raise ValueError(f"tap depth must be 1..4, got {depth}")
        _check_hw(image)
        feats = self.features(image)
        tap = feats[depth - 1].retain_grad()
        emb = self.head(feats[-1])
        return scalarize(emb, reduce), tap


def scalarize(emb, reduce="sum"):
    if reduce == "sum":
        return T.tsum(emb)
    if reduce == "l1":
        return T.tsum(T.absolute(emb))
    if reduce == "l2":
        return T.mul(T.tsum(T.mul(emb, emb)), 0.5)
    raise ValueError(f"unknown embedding reduction {reduce!r}")


class ScoreNet(Module):
    """Encoder (3 down-blocks) / decoder (3 up-blocks) with skips and a sigmoid head."""

    def __init__(self, n_classes=1, width=16, seed=0):
        super().__init__()
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        w1, w2, w3 = width, 2 * width, 4 * width
        plan = [
            ("enc1", 3, w1), ("enc2", w1, w2), ("enc3", w2, w3), ("mid", w3, w3),
            ("dec3", w3 + w3, w2), ("dec2", w2 + w2, w1), ("dec1", w1 + w1, w1),
        ]
        for name, cin, cout in plan:
            self._conv(f"{name}.conv", rng, cin, cout, 3)
            self._bn(f"{name}.bn", cout)
        self._conv("out", rng, w1, n_classes, 1, bias=True)

    def logits(self, image):
        _check_hw(image)
        x = image if isinstance(image, Tensor) else Tensor(image)
        e1 = self._conv_bn_relu("enc1", x)
        e2 = self._conv_bn_relu("enc2", T.max_pool2d(e1))
        e3 = self._conv_bn_relu("enc3", T.max_pool2d(e2))
        m = self._conv_bn_relu("mid", T.max_pool2d(e3))
        d3 = self._conv_bn_relu("dec3", T.concat([T.upsample2x(m), e3]))
        d2 = self._conv_bn_relu("dec2", T.concat([T.upsample2x(d3), e2]))
        d1 = self._conv_bn_relu("dec1", T.concat([T.upsample2x(d2), e1]))
        return T.conv2d(d1, self.params["out.weight"], self.params["out.bias"])

    def score_forward(self, image):
        """Per-class probabilities [N,C,H,W], clamped to [1e-6, 1-1e-6]."""
        return T.clip(T.sigmoid(self.logits(image)), OUTPUT_EPS, 1.0 - OUTPUT_EPS)


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(net, directory):
    """Write every parameter/buffer as a PSMT file plus an ``index.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(net, ActivationNet):
        header = ["# kind = activation", f"# channels = {','.join(map(str, net.channels))}",
                  f"# embed_dim = {net.embed_dim}"]
    else:
        width = net.params["enc1.conv.weight"].shape[0]
        header = ["# kind = score", f"# n_classes = {net.n_classes}", f"# width = {width}"]
    lines = list(header)
    for name, arr in net.state_dict().items():
        fname = f"{name}.psmt"
        T.save_psmt(directory / fname, np.asarray(arr))
        lines.append(f"{name} = {fname}")
    (directory / "index.txt").write_text("\n".join(lines) + "\n")
    return directory / "index.txt"


def load_checkpoint(directory):
    directory = Path(directory)
    meta, state = {}, OrderedDict()
    for line in (directory / "index.txt").read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.lstrip("# ").partition(" = ")
        if line.startswith("#"):
            meta[key] = value
        else:
            state[key] = T.load_psmt(directory / value)
    if meta.get("kind") == "activation":
        net = ActivationNet(tuple(int(c) for c in meta["channels"].split(",")), int(meta["embed_dim"]))
    elif meta.get("kind") == "score":
        net = ScoreNet(int(meta["n_classes"]), int(meta["width"]))
    else:
        raise ValueError(f"{directory}: unknown checkpoint kind {meta.get('kind')!r}")
    net.load_state_dict(state)
    return net

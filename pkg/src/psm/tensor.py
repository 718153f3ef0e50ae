"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to parent gradients. ``Tensor.backward`` walks the
graph once in reverse topological order.

Convolutions use the cross-correlation convention (no kernel flip), as in
most deep-learning libraries. Broadcasting is limited to scalars and
per-channel parameters.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "retains_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.retains_grad = False
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- basic properties -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def retain_grad(self):
        """Keep ``.grad`` on this intermediate tensor after backward (a gradient tap)."""
        self.retains_grad = True
        return self

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad=None):
        """Backpropagate from this tensor.

        Without an explicit ``grad`` the tensor must hold a single scalar.
        Gradients accumulate into ``.grad`` of every leaf with
        ``requires_grad`` and of every tensor marked with ``retain_grad``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node.retains_grad:
                if node.requires_grad or node.retains_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and _needs_grad(p):
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=DEFAULT_DTYPE):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    if not any(_needs_grad(p) for p in parents):
        return Tensor(data)
    return Tensor(data, _parents=parents, _backward=backward)


def tensor(data, requires_grad=False, dtype=None, name=None):
    arr = np.array(data, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr, requires_grad=requires_grad, name=name)


# -- elementwise ----------------------------------------------------------


def _check_same(a, b, op):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unscalar(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else DEFAULT_DTYPE)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unscalar(g, a.shape), _unscalar(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else DEFAULT_DTYPE)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unscalar(g, a.shape), _unscalar(-g, b.shape)))


def mul(a, b):
    """Elementwise product; ``b`` may be a constant scalar or same-shape array."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unscalar(g * bd, a.shape), _unscalar(g * ad, b.shape)

    return _make(ad * bd, (a, b), backward)


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def absolute(x):
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,))


def sigmoid(x):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log(x):
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def clip(x, lo, hi):
    """Clamp values; gradient flows only where the input was not clipped."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _make(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


def tsum(x):
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def tmean(x):
    n = x.data.size
    shape = x.shape
    return _make(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),))


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    sizes = [t.shape[axis] for t in tensors]
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ref[axis] = other[axis] = 0
        if ref != other:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- layers ---------------------------------------------------------------


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``weight`` [F,C,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if _needs_grad(x):
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               eps=1e-5, momentum=0.1):
    """Per-channel normalization of an [N,C,H,W] tensor.

    In training mode batch statistics are used and, when given, the running
    buffers are updated in place. In eval mode the running buffers are used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    d = x.data
    cshape = (1, -1, 1, 1)
    if training:
        m = d.shape[0] * d.shape[2] * d.shape[3]
        if m < 2:
            raise ShapeError("batch_norm: training mode needs N*H*W >= 2")
        mean = d.mean(axis=(0, 2, 3))
        var = d.var(axis=(0, 2, 3))
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * m / (m - 1)
    else:
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(d.dtype)
    xhat = (d - mean.reshape(cshape)) * inv.reshape(cshape)
    out = gamma.data.reshape(cshape) * xhat + beta.data.reshape(cshape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(cshape)
        if training:
            m = d.shape[0] * d.shape[2] * d.shape[3]
            gx = (inv.reshape(cshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3)).reshape(cshape)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(cshape)
            )
        else:
            gx = gxhat * inv.reshape(cshape)
        return gx, gg, gb

    return _make(out.astype(d.dtype), (x, gamma, beta), backward)


def max_pool2d(x, size=2):
    """Non-overlapping ``size``x``size`` max pooling; ties route to the first maximum."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d: spatial shape {x.shape[2:]} not divisible by {size}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _make(out, (x,), backward)


def upsample2x(x):
    """Nearest-neighbour 2x spatial upsampling."""
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _make(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def global_avg_pool(x):
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),))


def linear(x, weight, bias=None):
    """``x`` [N,D] times ``weight.T`` where weight is [M,D], plus optional bias [M]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data
        gw = g.T @ x.data
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward)


# -- PSMT tensor files ----------------------------------------------------

MAGIC = b"PSMT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_psmt(path, array):
    """Write an array as a PSMT file: magic, version, dtype, ndim, u32 extents, payload."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array)
    if arr.dtype not in _DTYPE_CODES:
        arr = arr.astype(np.float32)
    header = MAGIC + struct.pack("<BBB", VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + payload)


def load_psmt(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a PSMT file")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported PSMT version {version}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", raw, 7)
    offset = 7 + 4 * ndim
    dtype = _CODE_DTYPES[code].newbyteorder("<")
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if offset + arr.nbytes != len(raw):
        raise ValueError(f"{path}: payload size does not match header")
    return arr.reshape(shape).astype(_CODE_DTYPES[code])

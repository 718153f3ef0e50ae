"""Central finite-difference gradient checks in double precision."""

from __future__ import annotations

import numpy as np

from psm.tensor import Tensor


def numeric_grad(f, arrays, index, h=1e-5):
    """d f / d arrays[index] by central differences; ``f`` maps arrays to a float."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(arrays)
        x[i] = old - h
        fm = f(arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic, numeric, scale=None):
    """Largest absolute deviation divided by the gradient magnitude ``scale``.

    ``scale`` defaults to the largest entry of either gradient; an
    identically zero gradient is exact only if the numeric one is too.
    """
    if scale is None:
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    dev = float(np.abs(analytic - numeric).max(initial=0.0))
    return dev / scale if scale > 0 else dev


def check(build, arrays, h=1e-5, wrt=None):
    """Max relative error of the analytic gradient over the inputs ``wrt`` (default all).

    ``build`` takes a list of float64 Tensors and returns a scalar Tensor;
    reduce vector outputs with a random projection so every entry counts.
    Deviations are measured against the largest gradient entry over all
    checked inputs, so an input whose gradient vanishes is not judged on
    round-off alone.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays)) if wrt is None else wrt)
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(leaves).backward()

    def f(arrs):
        return float(build([Tensor(a) for a in arrs]).data)

    pairs = []
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        pairs.append((analytic, numeric_grad(f, arrays, i, h)))
    scale = max(max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs)
    return max(relative_error(a, n, scale) for a, n in pairs)

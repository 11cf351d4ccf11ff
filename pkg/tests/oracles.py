"""Independent reference implementations used only by the tests."""

import numpy as np


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for nn in range(n):
        for oo in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[oo]
                    for cc in range(c):
                        for i in range(k):
                            for j in range(k):
                                r = y * stride - pad + i
                                q = xx * stride - pad + j
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[nn, cc, r, q] * w[oo, cc, i, j]
                    out[nn, oo, y, xx] = acc
    return out


def numeric_grad(f, x, h=1e-6):
    """Central finite differences of scalar ``f`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def distinct_values(rng, shape, spacing=0.05):
    """Random array whose entries are pairwise at least ``spacing`` apart (no pooling ties)."""
    size = int(np.prod(shape))
    vals = rng.permutation(size) * spacing + rng.uniform(0, spacing / 10)
    return (vals - vals.mean()).reshape(shape)


def dependency_mask(arch, layer_index, y, x):
    """Boolean input mask of pixels that a unit structurally depends on.

    Propagates a one-hot mask down the stack, marking every cell of every
    window that touches a marked output cell (no interval arithmetic).
    """
    from convscope.arch import Conv, MaxPool

    shapes = arch.shapes()
    in_shapes = arch.input_shapes()
    _, h, w = shapes[layer_index]
    mask = np.zeros((h, w), dtype=bool)
    mask[y, x] = True
    for i in range(layer_index, -1, -1):
        layer = arch.layers[i]
        _, hi, wi = in_shapes[i]
        if isinstance(layer, (Conv, MaxPool)):
            pad = layer.pad if isinstance(layer, Conv) else 0
            below = np.zeros((hi, wi), dtype=bool)
            for oy, ox in zip(*np.nonzero(mask)):
                for a in range(layer.k):
                    for b in range(layer.k):
                        r, c = oy * layer.stride - pad + a, ox * layer.stride - pad + b
                        if 0 <= r < hi and 0 <= c < wi:
                            below[r, c] = True
            mask = below
    return mask

"""Forward and backward passes for every layer kind, with hand-written adjoints.

All functions work on float64 ``(n, c, h, w)`` arrays. Fully connected
outputs keep the 4-D layout as ``(n, features, 1, 1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, Extent4, ShapeError, as_tensor


class IntegrityError(RuntimeError):
    """Raised when recorded switches do not fit the tensor they route into."""


class ParameterError(ValueError):
    pass


@dataclass
class ConvParams:
    filters: np.ndarray  # (out_c, in_c, k, k)
    bias: np.ndarray  # (out_c,)
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        f = self.filters
        if f.ndim != 4 or f.shape[2] != f.shape[3]:
            raise ShapeError(f"filters must be (out_c, in_c, k, k) with square kernels, got {f.shape}")
        if self.stride < 1 or self.pad < 0:
            raise ParameterError(f"invalid stride={self.stride} / pad={self.pad}")
        if self.bias.shape != (f.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {f.shape[0]} filters")

    @property
    def k(self) -> int:
        return self.filters.shape[2]


@dataclass
class LrnParams:
    n_adj: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.n_adj < 1 or self.n_adj % 2 == 0:
            raise ParameterError(f"n_adj must be odd and >= 1, got {self.n_adj}")
        if self.k <= 0 or self.beta <= 0:
            raise ParameterError("LRN requires k > 0 and beta > 0")


@dataclass
class SwitchMap:
    """Argmax coordinates of a max-pooling pass, one per pooled element."""

    rows: np.ndarray  # (n, c, ho, wo) int64 input row of each maximum
    cols: np.ndarray  # (n, c, ho, wo) int64 input column of each maximum
    in_shape: tuple
    window: int
    stride: int
    ceil_mode: bool

    @property
    def out_shape(self) -> tuple:
        return self.rows.shape

    def validate(self) -> None:
        n, c, h, w = self.in_shape
        ho, wo = self.rows.shape[2:]
        oy = (np.arange(ho) * self.stride)[None, None, :, None]
        ox = (np.arange(wo) * self.stride)[None, None, None, :]
        ok = (
            (self.rows >= oy) & (self.rows < oy + self.window) & (self.rows < h) & (self.rows >= 0)
            & (self.cols >= ox) & (self.cols < ox + self.window) & (self.cols < w) & (self.cols >= 0)
        )
        if not np.all(ok):
            raise IntegrityError("switch coordinate outside its pooling window or the input bounds")


def conv_out_shape(shape, k: int, stride: int, pad: int = 0, ceil_mode: bool = False,
                   channels: int | None = None) -> Extent4:
    """Output extents of a square sliding window (convolution or pooling)."""
    n, c, h, w = shape
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")

    def one(size):
        span = size + 2 * pad - k
        out = (-(-span // stride) if ceil_mode else span // stride) + 1
        # the last window has to start inside the (left-padded) input
        if ceil_mode and (out - 1) * stride >= size + pad:
            out -= 1
        return out

    return Extent4(n, c if channels is None else channels, one(h), one(w))


# -- convolution -------------------------------------------------------------
# Internally the convolution works channel-last so that the im2col matrix and
# its adjoint scatter touch contiguous memory. Column order is (i, j, c).

def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    xh = x.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xh, (k, k), axis=(1, 2))  # (n, y, x, c, i, j)
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = x.shape[:2]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)


def _filter_matrix(filters: np.ndarray) -> np.ndarray:
    return filters.transpose(0, 2, 3, 1).reshape(filters.shape[0], -1)


def conv_forward(x: np.ndarray, p: ConvParams, return_cols: bool = False):
    """Cross-correlation ``out[n,o,y,x] = b[o] + sum in[n,c,ys-p+i,xs-p+j] * f[o,c,i,j]``.

    Input outside the frame counts as zero. With ``return_cols`` the im2col
    matrix is returned too, so a later :func:`conv_backward` can reuse it.
    """
    x = as_tensor(x)
    out_c, in_c, k, _ = p.filters.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"input has {x.shape[1]} channels, filters expect {in_c}")
    n, _, ho, wo = conv_out_shape(x.shape, k, p.stride, p.pad)
    cols = _im2col(x, k, p.stride, p.pad, ho, wo)
    out = cols @ _filter_matrix(p.filters).T
    out += p.bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv_transpose(grad_out: np.ndarray, filters: np.ndarray, stride: int, pad: int,
                   in_hw: tuple) -> np.ndarray:
    """Adjoint of the bias-free convolution: scatter each output through its filter."""
    n, out_c, ho, wo = grad_out.shape
    _, in_c, k, _ = filters.shape
    h, w = in_hw
    if filters.shape[0] != out_c:
        raise ShapeError(f"{out_c} channels to scatter but filters have {filters.shape[0]} outputs")
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_c)
    dcols = (g2 @ _filter_matrix(filters)).reshape(n, ho, wo, k, k, in_c)
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, in_c), dtype=DTYPE)
    ys = (ho - 1) * stride + 1
    xs = (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + ys : stride, j : j + xs : stride] += dcols[:, :, :, i, j]
    return np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + w].transpose(0, 3, 1, 2))


def conv_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray, cols: np.ndarray | None = None,
                  need_input: bool = True):
    """Return ``(grad_in, grad_filters, grad_bias)`` for :func:`conv_forward`.

    ``grad_in`` is ``None`` when ``need_input`` is false.
    """
    x = as_tensor(x)
    out_c, in_c, k, _ = p.filters.shape
    expected = conv_out_shape(x.shape, k, p.stride, p.pad, channels=out_c)
    if tuple(grad_out.shape) != tuple(expected):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {tuple(expected)}")
    _, _, ho, wo = expected
    if cols is None:
        cols = _im2col(x, k, p.stride, p.pad, ho, wo)
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_c)
    grad_filters = (g2.T @ cols).reshape(out_c, k, k, in_c).transpose(0, 3, 1, 2)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_in = conv_transpose(grad_out, p.filters, p.stride, p.pad, x.shape[2:]) if need_input else None
    return grad_in, np.ascontiguousarray(grad_filters), grad_bias


# -- pointwise ---------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0.0)


# -- max pooling -------------------------------------------------------------

def maxpool_forward(x: np.ndarray, window: int, stride: int, ceil_mode: bool = False):
    """Max pooling that records argmax switches.

    Ties go to the first element in row-major scan order of the window.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    _, _, ho, wo = conv_out_shape(x.shape, window, stride, 0, ceil_mode)
    need_h = (ho - 1) * stride + window
    need_w = (wo - 1) * stride + window
    if need_h > h or need_w > w:
        x = np.pad(x, ((0, 0), (0, 0), (0, max(0, need_h - h)), (0, max(0, need_w - w))),
                   constant_values=-np.inf)
    ys = (ho - 1) * stride + 1
    xs = (wo - 1) * stride + 1
    best = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int64)
    # scanning offsets in row-major order with a strict ">" keeps the first maximum
    for i in range(window):
        for j in range(window):
            v = x[:, :, i : i + ys : stride, j : j + xs : stride]
            better = v > best
            np.putmask(best, better, v)
            np.putmask(arg, better, i * window + j)
    base_r = (np.arange(ho) * stride)[None, None, :, None]
    base_c = (np.arange(wo) * stride)[None, None, None, :]
    rows = base_r + arg // window
    cols = base_c + arg % window
    sw = SwitchMap(rows, cols, (n, c, h, w), window, stride, ceil_mode)
    return best, sw


def _flat_switch_index(sw: SwitchMap) -> np.ndarray:
    n, c, h, w = sw.in_shape
    plane = (np.arange(n)[:, None] * c + np.arange(c)[None, :])[:, :, None, None]
    return ((plane * h + sw.rows) * w + sw.cols).ravel()


def maxpool_backward(sw: SwitchMap, grad_out: np.ndarray) -> np.ndarray:
    """Route gradients to the recorded argmax positions, summing overlaps."""
    if tuple(grad_out.shape) != tuple(sw.out_shape):
        raise ShapeError(f"grad_out shape {grad_out.shape} != pooled shape {sw.out_shape}")
    sw.validate()
    size = int(np.prod(sw.in_shape))
    # bincount accumulates in row-major order of the pooled positions
    flat = np.bincount(_flat_switch_index(sw), weights=np.asarray(grad_out, DTYPE).ravel(),
                       minlength=size)
    return flat.reshape(sw.in_shape)


# -- local response normalization ---------------------------------------------

def _channel_window_sum(v: np.ndarray, n_adj: int) -> np.ndarray:
    half = n_adj // 2
    c = v.shape[1]
    out = np.zeros_like(v)
    for d in range(-half, half + 1):
        lo, hi = max(0, -d), min(c, c - d)
        out[:, lo:hi] += v[:, lo + d : hi + d]
    return out


def lrn_forward(x: np.ndarray, p: LrnParams) -> np.ndarray:
    """``x / (k + alpha * sum_{c' near c} x[c']**2) ** beta`` across channels."""
    x = as_tensor(x)
    denom = p.k + p.alpha * _channel_window_sum(x * x, p.n_adj)
    return x * denom ** (-p.beta)


def lrn_backward(x: np.ndarray, p: LrnParams, grad_out: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    denom = p.k + p.alpha * _channel_window_sum(x * x, p.n_adj)
    scale = denom ** (-p.beta)
    t = grad_out * x * scale / denom
    # the clamped window is symmetric, so the adjoint uses the same window sum
    return grad_out * scale - 2.0 * p.alpha * p.beta * x * _channel_window_sum(t, p.n_adj)


# -- fully connected -----------------------------------------------------------

def fc_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map on the flattened input; returns ``(n, out, 1, 1)``."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if flat.shape[1] != W.shape[1]:
        raise ShapeError(f"flattened input has {flat.shape[1]} features, weights expect {W.shape[1]}")
    return (flat @ W.T + b).reshape(n, W.shape[0], 1, 1)


def fc_backward(x: np.ndarray, W: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_in, grad_W, grad_b)`` for :func:`fc_forward`."""
    n = x.shape[0]
    flat = x.reshape(n, -1)
    g = grad_out.reshape(n, W.shape[0])
    return (g @ W).reshape(x.shape), g.T @ flat, g.sum(axis=0)


# -- dropout -----------------------------------------------------------------

def dropout_apply(x: np.ndarray, rate: float, rng: np.random.Generator | None, mode: str = "train"):
    """Inverted dropout. Returns ``(out, mask)``; eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x.copy(), np.ones(x.shape, dtype=bool)
    if mode != "train":
        raise ParameterError(f"unknown mode {mode!r}")
    mask = rng.random(x.shape) >= rate
    return x * mask / (1.0 - rate), mask


def dropout_backward(mask: np.ndarray, rate: float, grad_out: np.ndarray) -> np.ndarray:
    if rate == 0.0:
        return grad_out.copy()
    return grad_out * mask / (1.0 - rate)


# -- softmax + cross-entropy ---------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, label: int):
    """Single-example loss. Returns ``(loss, probs, grad_logits)``."""
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max()
    log_probs = z - math.log(np.exp(z).sum())
    probs = np.exp(log_probs)
    grad = probs.copy()
    grad[label] -= 1.0
    return float(-log_probs[label]), probs, grad


def softmax_xent_batch(logits: np.ndarray, labels: np.ndarray):
    """Mean loss over a batch of ``(n, classes)`` logits; gradient is scaled by ``1/n``."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(log_probs)
    idx = np.arange(n)
    loss = float(-log_probs[idx, labels].mean())
    grad = probs.copy()
    grad[idx, labels] -= 1.0
    return loss, probs, grad / n

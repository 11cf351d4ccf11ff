"""Resampling helpers: bilinear resize and affine warps with constant fill."""

from __future__ import annotations

import math

import numpy as np

from .tensor import DTYPE


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres, edge-clamped
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a ``(c, h, w)`` or ``(n, c, h, w)`` array."""
    img = np.asarray(img, dtype=DTYPE)
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    lo, hi, f = _axis_weights(h, out_h)
    rows = img[..., lo, :] * (1.0 - f)[:, None] + img[..., hi, :] * f[:, None]
    lo, hi, f = _axis_weights(w, out_w)
    return rows[..., lo] * (1.0 - f) + rows[..., hi] * f


def resize_short_side(img: np.ndarray, target: int) -> np.ndarray:
    h, w = img.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1 pixels")
    if h <= w:
        nh, nw = target, max(target, int(round(w * target / h)))
    else:
        nh, nw = max(target, int(round(h * target / w))), target
    return resize_bilinear(img, nh, nw)


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[-2:]
    y0, x0 = (h - size) // 2, (w - size) // 2
    return img[..., y0 : y0 + size, x0 : x0 + size].copy()


def warp_affine(img: np.ndarray, matrix: np.ndarray, offset: np.ndarray, fill: float = 0.0,
                order: int = 1) -> np.ndarray:
    """Sample ``img`` (``(c, h, w)``) at ``matrix @ [y, x] + offset`` for every output pixel.

    Coordinates falling outside the frame read ``fill``. ``order=0`` is
    nearest neighbour, ``order=1`` bilinear.
    """
    img = np.asarray(img, dtype=DTYPE)
    c, h, w = img.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=DTYPE), np.arange(w, dtype=DTYPE), indexing="ij")
    sy = matrix[0, 0] * yy + matrix[0, 1] * xx + offset[0]
    sx = matrix[1, 0] * yy + matrix[1, 1] * xx + offset[1]

    def pick(iy, ix):
        inside = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
        vals = img[:, np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        return np.where(inside, vals, fill)

    if order == 0:
        return pick(np.floor(sy + 0.5).astype(np.int64), np.floor(sx + 0.5).astype(np.int64))
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    return (pick(y0, x0) * (1 - fy) * (1 - fx) + pick(y0, x0 + 1) * (1 - fy) * fx
            + pick(y0 + 1, x0) * fy * (1 - fx) + pick(y0 + 1, x0 + 1) * fy * fx)


def transform_image(img: np.ndarray, kind: str, value: float, fill: float = 0.0, order: int = 1) -> np.ndarray:
    """Apply a vertical translation (px), scale (ratio) or rotation (degrees) about the centre."""
    c, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    if kind == "translate":
        return warp_affine(img, np.eye(2), np.array([-value, 0.0]), fill, order)
    if kind == "scale":
        if value <= 0:
            raise ValueError(f"scale must be positive, got {value}")
        m = np.eye(2) / value
    elif kind == "rotate":
        t = math.radians(value)
        # inverse rotation maps output pixels back into the source frame
        m = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]])
    else:
        raise ValueError(f"unknown transform {kind!r}")
    centre = np.array([cy, cx])
    return warp_affine(img, m, centre - m @ centre, fill, order)

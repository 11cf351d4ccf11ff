"""In-memory datasets and the synthetic desk-scale image generators."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    """Images as ``(n, 3, h, w)`` floats in ``[0, 255]`` plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if not self.ids:
            self.ids = [f"{i:06d}" for i in range(len(self.labels))]
        if not self.class_names:
            self.class_names = [str(c) for c in range(int(self.labels.max()) + 1 if len(self.labels) else 0)]

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], list(self.class_names),
                       [self.ids[i] for i in index])


SHAPE_CLASSES = ["disk", "square", "triangle", "plus", "ring", "hbars", "vbars", "xcross", "checker", "dots"]


def _shape_mask(kind: str, size: int, cy: float, cx: float, r: float, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    inside = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    thick = max(1.5, r / 3.0)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.55)
    if kind == "plus":
        return inside & ((np.abs(dy) <= thick / 2) | (np.abs(dx) <= thick / 2))
    if kind == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r - thick)
    if kind == "hbars":
        return inside & (np.floor((dy + r) / 2.0) % 2 == 0)
    if kind == "vbars":
        return inside & (np.floor((dx + r) / 2.0) % 2 == 0)
    if kind == "xcross":
        return inside & ((np.abs(dy - dx) <= thick / 1.4) | (np.abs(dy + dx) <= thick / 1.4))
    if kind == "checker":
        return inside & ((np.floor((dy + r) / 3.0) + np.floor((dx + r) / 3.0)) % 2 == 0)
    if kind == "dots":
        off = r * 0.6
        rr = max(1.8, r * 0.35)
        return ((dy + off) ** 2 + (dx + off) ** 2 <= rr ** 2) | ((dy - off) ** 2 + (dx - off) ** 2 <= rr ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def _background(size: int, rng, noise: float) -> np.ndarray:
    base = rng.uniform(40, 215, size=(3, 1, 1))
    return base + rng.normal(0.0, noise, size=(3, size, size))


def shapes_dataset(n_per_class: int, size: int = 32, seed: int = 0, noise: float = 14.0) -> Dataset:
    """Ten classes of jittered, randomly coloured shapes on noisy backgrounds."""
    rng = np.random.default_rng(seed)
    n = n_per_class * len(SHAPE_CLASSES)
    labels = np.tile(np.arange(len(SHAPE_CLASSES)), n_per_class)
    rng.shuffle(labels)
    images = np.empty((n, 3, size, size))
    for i, lab in enumerate(labels):
        img = _background(size, rng, noise)
        r = rng.uniform(0.22, 0.36) * size
        cy, cx = size / 2 - 0.5 + rng.uniform(-0.18, 0.18, size=2) * size
        mask = _shape_mask(SHAPE_CLASSES[lab], size, cy, cx, r, rng)
        colour = rng.uniform(0, 255, size=(3, 1, 1))
        # keep foreground/background contrast away from zero
        bg = img.mean(axis=(1, 2), keepdims=True)
        while np.abs(colour - bg).max() < 70:
            colour = rng.uniform(0, 255, size=(3, 1, 1))
        img = np.where(mask[None], colour + rng.normal(0.0, noise / 2, size=(3, size, size)), img)
        images[i] = np.clip(img, 0, 255)
    return Dataset(np.round(images), labels, list(SHAPE_CLASSES))


QUADRANT_TEXTURES = ["hbars", "vbars", "checker", "xcross"]


def _texture(kind: str, size: int, rng) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    phase = rng.integers(0, 4)
    if kind == "hbars":
        m = ((yy + phase) // 2) % 2 == 0
    elif kind == "vbars":
        m = ((xx + phase) // 2) % 2 == 0
    elif kind == "checker":
        m = (((yy + phase) // 3) + ((xx + phase) // 3)) % 2 == 0
    elif kind == "xcross":
        m = ((yy - xx + phase) % 6 <= 1) | ((yy + xx + phase) % 6 <= 1)
    else:
        raise ValueError(kind)
    return m


def quadrant_dataset(n: int, size: int = 32, seed: int = 0, patch: int = 12, noise: float = 10.0):
    """Texture patch inside one random quadrant; the class is the texture.

    Returns ``(dataset, quadrants)`` where quadrant ``q`` is ``2 * row + col``.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(QUADRANT_TEXTURES), size=n)
    quads = rng.integers(0, 4, size=n)
    half = size // 2
    images = np.empty((n, 3, size, size))
    for i in range(n):
        img = 128.0 + rng.normal(0.0, noise, size=(3, size, size))
        qy, qx = divmod(int(quads[i]), 2)
        y0 = qy * half + rng.integers(0, half - patch + 1)
        x0 = qx * half + rng.integers(0, half - patch + 1)
        m = _texture(QUADRANT_TEXTURES[labels[i]], patch, rng)
        fg = rng.uniform(0, 60) if rng.random() < 0.5 else rng.uniform(195, 255)
        block = img[:, y0 : y0 + patch, x0 : x0 + patch]
        img[:, y0 : y0 + patch, x0 : x0 + patch] = np.where(m[None], fg, block)
        images[i] = np.clip(img, 0, 255)
    return Dataset(np.round(images), labels, list(QUADRANT_TEXTURES)), quads


def paste_part(images: np.ndarray, part: np.ndarray, y0: int, x0: int) -> np.ndarray:
    """Paste the same ``(3, ph, pw)`` part at the same location of every image."""
    out = np.array(images, dtype=np.float64, copy=True)
    ph, pw = part.shape[1:]
    out[:, :, y0 : y0 + ph, x0 : x0 + pw] = part
    return out

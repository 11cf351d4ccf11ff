"""Projection of feature activations back to pixel space, top-k search, grids.

Going down the network each layer is replaced by its reverse: pooling by
switch-driven unpooling, relu by relu, convolution by its transpose (the
input-gradient map, bias excluded), fully connected layers by ``W.T``.
Contrast normalization and dropout pass the signal through unchanged.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .arch import ArchitectureSpec, Conv, Dropout, Flatten, FullyConnected, Lrn, MaxPool, Relu, SoftmaxClassifier
from .network import ActivationRecord, net_forward
from .tensor import DTYPE, ShapeError

log = logging.getLogger(__name__)


@dataclass
class ActivationSelection:
    layer: int  # index into arch.layers
    map_index: int
    coord: tuple | None = None  # (y, x); None means the strongest activation of the map
    keep: str = "single"  # "single" activation or the "whole-map"
    batch_index: int = 0


@dataclass
class ProjectionResult:
    pixels: np.ndarray  # (1, c, h, w), same shape as the network input
    image_id: str
    activation: float
    coord: tuple
    box: tuple  # (y0, y1, x0, x1) inclusive receptive-field box in input pixels
    zero_activation: bool = False

    @property
    def image(self) -> np.ndarray:
        return self.pixels[0]


def select_switches(sw: L.SwitchMap, b: int) -> L.SwitchMap:
    n, c, h, w = sw.in_shape
    return L.SwitchMap(sw.rows[b : b + 1], sw.cols[b : b + 1], (1, c, h, w), sw.window, sw.stride, sw.ceil_mode)


def unpool(recon: np.ndarray, sw: L.SwitchMap) -> np.ndarray:
    """Place every value at its recorded argmax; overlapping placements add up."""
    if tuple(recon.shape) != tuple(sw.out_shape):
        raise ShapeError(f"reconstruction shape {recon.shape} != pooled shape {sw.out_shape}")
    sw.validate()
    n, c, h, w = sw.in_shape
    out = np.zeros(sw.in_shape, dtype=DTYPE)
    nn, cc = np.indices((n, c))
    ho, wo = sw.out_shape[2:]
    # pooled positions in row-major order, one vectorised placement over (n, c) each
    for y in range(ho):
        for x in range(wo):
            out[nn, cc, sw.rows[:, :, y, x], sw.cols[:, :, y, x]] += recon[:, :, y, x]
    return out


def deconv_filter(recon: np.ndarray, p: L.ConvParams, in_hw: tuple | None = None) -> np.ndarray:
    """Transposed filtering: the adjoint of ``conv_forward`` without its bias.

    ``in_hw`` is the spatial size of the layer beneath; when omitted the
    smallest size consistent with the geometry is used.
    """
    if recon.shape[1] != p.filters.shape[0]:
        raise ShapeError(f"reconstruction has {recon.shape[1]} maps, filters produce {p.filters.shape[0]}")
    if in_hw is None:
        ho, wo = recon.shape[2:]
        in_hw = ((ho - 1) * p.stride + p.k - 2 * p.pad, (wo - 1) * p.stride + p.k - 2 * p.pad)
    return L.conv_transpose(np.asarray(recon, DTYPE), p.filters, p.stride, p.pad, in_hw)


def receptive_field(arch: ArchitectureSpec, layer: int, y: int, x: int) -> tuple:
    """Inclusive input box ``(y0, y1, x0, x1)`` that can influence unit ``(y, x)`` of ``layer``."""
    shapes = arch.input_shapes()
    y0 = y1 = y
    x0 = x1 = x
    for i in range(layer, -1, -1):
        lyr = arch.layers[i]
        if isinstance(lyr, (Flatten, FullyConnected, SoftmaxClassifier)):
            _, h, w = shapes[0]
            return (0, h - 1, 0, w - 1)
        if isinstance(lyr, (Conv, MaxPool)):
            pad = lyr.pad if isinstance(lyr, Conv) else 0
            _, h, w = shapes[i]
            y0, y1 = max(0, y0 * lyr.stride - pad), min(h - 1, y1 * lyr.stride - pad + lyr.k - 1)
            x0, x1 = max(0, x0 * lyr.stride - pad), min(w - 1, x1 * lyr.stride - pad + lyr.k - 1)
    return (y0, y1, x0, x1)


def receptive_size(arch: ArchitectureSpec, layer: int) -> int:
    """Side of the full (unclipped) receptive field of one unit at ``layer``."""
    size, jump = 1, 1
    for lyr in arch.layers[: layer + 1]:
        if isinstance(lyr, (Flatten, FullyConnected, SoftmaxClassifier)):
            return arch.input_shape[1]
        if isinstance(lyr, (Conv, MaxPool)):
            size += (lyr.k - 1) * jump
            jump *= lyr.stride
    return size


def _descend(arch: ArchitectureSpec, params: dict, record: ActivationRecord, start: int, recon: np.ndarray,
             b: int) -> np.ndarray:
    in_shapes = arch.input_shapes()
    for i in range(start, -1, -1):
        lyr = arch.layers[i]
        if isinstance(lyr, MaxPool):
            recon = unpool(recon, select_switches(record.switches[i], b))
        elif isinstance(lyr, Relu):
            recon = L.relu_forward(recon)
        elif isinstance(lyr, Conv):
            p = L.ConvParams(params[f"{i}.weight"], params[f"{i}.bias"], lyr.stride, lyr.pad)
            recon = deconv_filter(recon, p, in_shapes[i][1:])
        elif isinstance(lyr, (FullyConnected, SoftmaxClassifier)):
            W = params[f"{i}.weight"]
            recon = (recon.reshape(1, -1) @ W).reshape((1,) + in_shapes[i])
        elif isinstance(lyr, Flatten):
            recon = recon.reshape((1,) + in_shapes[i])
        elif isinstance(lyr, (Lrn, Dropout)):
            pass
    return recon


def project(arch: ArchitectureSpec, params: dict, record: ActivationRecord, sel: ActivationSelection,
            image_id: str = "") -> ProjectionResult:
    """Reconstruct the input pattern behind one activation (or one whole map)."""
    act = record.outputs[sel.layer][sel.batch_index : sel.batch_index + 1]
    c, h, w = act.shape[1:]
    if not 0 <= sel.map_index < c:
        raise IndexError(f"map {sel.map_index} out of range for {c} maps at layer {sel.layer}")
    fmap = act[0, sel.map_index]
    if sel.coord is None:
        flat = int(np.argmax(fmap))
        coord = divmod(flat, w)
    else:
        coord = tuple(int(v) for v in sel.coord)
        if not (0 <= coord[0] < h and 0 <= coord[1] < w):
            raise IndexError(f"coordinate {coord} outside {h}x{w} map")
    value = float(fmap[coord])
    seed = np.zeros_like(act)
    if sel.keep == "single":
        seed[0, sel.map_index, coord[0], coord[1]] = value
        box = receptive_field(arch, sel.layer, *coord)
    elif sel.keep == "whole-map":
        seed[0, sel.map_index] = fmap
        nz = np.argwhere(fmap != 0)
        if len(nz):
            lo = receptive_field(arch, sel.layer, *nz.min(axis=0))
            hi = receptive_field(arch, sel.layer, *nz.max(axis=0))
            box = (lo[0], hi[1], lo[2], hi[3])
        else:
            box = receptive_field(arch, sel.layer, *coord)
    else:
        raise ValueError(f"unknown keep policy {sel.keep!r}")
    zero = not np.any(seed)
    if zero:
        log.warning("selected activation at layer %d map %d is zero; projection is empty", sel.layer, sel.map_index)
    pixels = _descend(arch, params, record, sel.layer, seed, sel.batch_index)
    return ProjectionResult(pixels, image_id, value, coord, box, zero)


# -- top-k search ----------------------------------------------------------------------------

@dataclass
class TopKEntry:
    index: int
    image_id: str
    coord: tuple
    value: float


@dataclass
class TopKResult:
    entries: list
    truncated: bool = False  # fewer images than requested

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


def map_maxima(arch: ArchitectureSpec, params: dict, inputs: np.ndarray, layer: int, map_index: int,
               batch: int = 128):
    """Per image: the maximum of one feature map and its first row-major argmax."""
    values, coords = [], []
    for s in range(0, len(inputs), batch):
        acts = net_forward(arch, params, inputs[s : s + batch], upto=layer).outputs[layer][:, map_index]
        flat = acts.reshape(len(acts), -1)
        arg = flat.argmax(axis=1)
        values.append(flat[np.arange(len(flat)), arg])
        coords.extend(divmod(int(a), acts.shape[2]) for a in arg)
    return (np.concatenate(values) if values else np.zeros(0)), coords


def top_k(arch: ArchitectureSpec, params: dict, inputs: np.ndarray, layer: int, map_index: int, k: int,
          ids: list | None = None) -> TopKResult:
    """The ``k`` strongest activations of a map, one per image, descending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    values, coords = map_maxima(arch, params, inputs, layer, map_index)
    ids = ids if ids is not None else [str(i) for i in range(len(inputs))]
    # stable sort on -value keeps dataset order among equal values
    order = np.argsort(-values, kind="stable")[:k]
    entries = [TopKEntry(int(i), ids[i], coords[i], float(values[i])) for i in order]
    truncated = len(inputs) < k
    if truncated:
        log.warning("top_k: only %d images available for k=%d", len(inputs), k)
    return TopKResult(entries, truncated)


# -- rendering -------------------------------------------------------------------------------------

def normalize_cell(t: np.ndarray) -> np.ndarray:
    """Stretch a ``(3, h, w)`` array to [0, 255]; a constant array becomes mid-gray."""
    lo, hi = float(t.min()), float(t.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full(t.shape, 128.0)
    return (t - lo) * (255.0 / (hi - lo))


def crop_box(t: np.ndarray, box: tuple) -> np.ndarray:
    y0, y1, x0, x1 = box
    return t[..., y0 : y1 + 1, x0 : x1 + 1]


def _tile(cells: list, rows: int, cols: int, cell_h: int, cell_w: int, gutter: int, bg: float) -> np.ndarray:
    H = rows * cell_h + (rows - 1) * gutter
    W = cols * cell_w + (cols - 1) * gutter
    canvas = np.full((3, H, W), bg)
    for n, cell in enumerate(cells):
        r, c = divmod(n, cols)
        y, x = r * (cell_h + gutter), c * (cell_w + gutter)
        canvas[:, y : y + cell.shape[1], x : x + cell.shape[2]] = cell
    return canvas


def grid_layout(count: int) -> tuple:
    cols = max(1, math.ceil(math.sqrt(count)))
    return (max(1, math.ceil(count / cols)), cols)


def render_grid(projections: list, patches: list | None = None, layout: tuple | None = None,
                path=None, gutter: int = 2) -> np.ndarray:
    """Tile projections (contrast-stretched per cell) and, to their right, the image patches.

    Returns the ``(h, w, 3)`` uint8 image and writes it to ``path`` if given.
    """
    from .io import save_image, to_uint8

    if patches is not None and len(patches) != len(projections):
        raise ValueError("need one patch per projection")
    if not projections:
        raise ValueError("nothing to render")
    rows, cols = layout or grid_layout(len(projections))
    cell_h = max(p.shape[-2] for p in projections)
    cell_w = max(p.shape[-1] for p in projections)
    panel = _tile([normalize_cell(np.asarray(p, DTYPE).reshape(3, *p.shape[-2:])) for p in projections],
                  rows, cols, cell_h, cell_w, gutter, 0.0)
    if patches is not None:
        right = _tile([np.clip(np.asarray(p, DTYPE).reshape(3, *p.shape[-2:]), 0, 255) for p in patches],
                      rows, cols, cell_h, cell_w, gutter, 0.0)
        sep = np.full((3, panel.shape[1], 2 * gutter + 2), 255.0)
        panel = np.concatenate([panel, sep, right], axis=2)
    img = to_uint8(panel.transpose(1, 2, 0))
    if path is not None:
        save_image(img, path)
    return img

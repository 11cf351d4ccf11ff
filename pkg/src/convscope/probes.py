"""Occlusion sensitivity, part correspondence and transformation invariance.

All probes work on network input, i.e. images that are already resized,
cropped, mean-subtracted and scaled. A fill value of 0 is therefore the
dataset mean at every location.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imaging import transform_image
from .layers import ParameterError
from .model import Model
from .network import net_forward
from .tensor import DTYPE, ShapeError

SIGN_TAU = 1e-6
UNITS = {"translate": "px", "scale": "ratio", "rotate": "degrees"}
IDENTITY = {"translate": 0.0, "scale": 1.0, "rotate": 0.0}


class ProbeInputError(LookupError):
    """A named part has no annotation for the image."""


def _single(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 4 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 3:
        raise ShapeError(f"expected one (c, h, w) image, got shape {x.shape}")
    return x


# -- occlusion ------------------------------------------------------------------------

@dataclass
class OcclusionReport:
    prob_map: np.ndarray  # (gh, gw) probability of the true class
    act_map: np.ndarray  # (gh, gw) summed activation of the chosen map
    label_map: np.ndarray  # (gh, gw) argmax class
    occluder: tuple  # (size px, stride px, fill)
    baseline: tuple  # (probability, activation) of the unoccluded image
    positions: list = field(default_factory=list)  # top-left (y, x) along each grid axis
    layer: int = -1
    map_index: int = 0
    label: int = 0

    @property
    def centres(self) -> np.ndarray:
        """Occluder centre for every grid axis position, in input pixels."""
        return np.asarray(self.positions, dtype=DTYPE) + (self.occluder[0] - 1) / 2.0

    def argmin_centre(self) -> tuple:
        gy, gx = np.unravel_index(int(np.argmin(self.prob_map)), self.prob_map.shape)
        c = self.centres
        return float(c[gy]), float(c[gx])


def paste_square(x: np.ndarray, y0: int, x0: int, size: int, fill: float) -> np.ndarray:
    """Copy of ``x`` with a square of ``fill`` at ``(y0, x0)``, clipped at the borders."""
    out = np.array(x, dtype=DTYPE, copy=True)
    h, w = out.shape[-2:]
    ya, xa = max(0, y0), max(0, x0)
    yb, xb = min(h, y0 + size), min(w, x0 + size)
    if ya < yb and xa < xb:
        out[..., ya:yb, xa:xb] = fill
    return out


def strongest_map(model: Model, x: np.ndarray, layer: int) -> int:
    """Map holding the single largest activation of the unoccluded image."""
    act = net_forward(model.arch, model.params, _single(x)[None], upto=layer).outputs[layer][0]
    return int(np.argmax(act.reshape(act.shape[0], -1).max(axis=1)))


def occlusion_sweep(model: Model, x: np.ndarray, label: int, layer: int, map_index="strongest",
                    occ_size: int | None = None, occ_stride: int = 4, fill: float = 0.0,
                    batch: int = 128) -> OcclusionReport:
    """Slide a square over the image, recording class probability and one map's total activation."""
    x = _single(x)
    h, w = x.shape[-2:]
    if occ_stride < 1:
        raise ParameterError(f"occluder stride must be >= 1, got {occ_stride}")
    size = occ_size if occ_size is not None else max(1, round(0.25 * min(h, w)))
    if not 1 <= size <= min(h, w):
        raise ParameterError(f"occluder size {size} outside [1, {min(h, w)}]")
    if map_index == "strongest":
        map_index = strongest_map(model, x, layer)
    ys = list(range(0, h - size + 1, occ_stride))
    xs = list(range(0, w - size + 1, occ_stride))
    if len(ys) != len(xs):
        raise ParameterError("occlusion grid requires a square input")
    grid = [(a, b) for a in ys for b in xs]
    probs, acts = [], []
    for s in range(0, len(grid), batch):
        xb = np.stack([paste_square(x, a, b, size, fill) for a, b in grid[s : s + batch]])
        rec = net_forward(model.arch, model.params, xb)
        probs.append(rec.probs)
        acts.append(rec.outputs[layer][:, map_index].reshape(len(xb), -1).sum(axis=1))
    probs = np.concatenate(probs)
    acts = np.concatenate(acts)
    base = net_forward(model.arch, model.params, x[None])
    shape = (len(ys), len(xs))
    return OcclusionReport(
        prob_map=probs[:, label].reshape(shape),
        act_map=acts.reshape(shape),
        label_map=probs.argmax(axis=1).reshape(shape),
        occluder=(size, occ_stride, fill),
        baseline=(float(base.probs[0, label]), float(base.outputs[layer][0, map_index].sum())),
        positions=ys, layer=layer, map_index=int(map_index), label=int(label),
    )


# -- correspondence ------------------------------------------------------------------------

@dataclass
class CorrespondenceResult:
    mean: float
    std: float
    layer: int = -1
    part: str = ""
    pairs: int = 0


def feature_difference(model: Model, x: np.ndarray, x_occluded: np.ndarray, layer: int) -> np.ndarray:
    """Flattened eval-mode activation of ``x`` minus that of ``x_occluded`` at ``layer``."""
    x, x_occluded = _single(x), _single(x_occluded)
    if x.shape != x_occluded.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {x_occluded.shape}")
    a = net_forward(model.arch, model.params, x[None], upto=layer).outputs[layer]
    b = net_forward(model.arch, model.params, x_occluded[None], upto=layer).outputs[layer]
    return (a - b).reshape(-1)


def sign3(v: np.ndarray, tau: float = SIGN_TAU) -> np.ndarray:
    """Sign with a dead zone: entries with ``|v| <= tau`` map to 0."""
    v = np.asarray(v)
    return np.where(np.abs(v) <= tau, 0, np.sign(v)).astype(np.int8)


def correspondence_score(eps_list, tau: float = SIGN_TAU, layer: int = -1, part: str = "") -> CorrespondenceResult:
    """Mean and std over unordered pairs of the normalized Hamming distance between sign patterns."""
    eps = [np.asarray(e).reshape(-1) for e in eps_list]
    if len(eps) < 2:
        raise ParameterError(f"need at least 2 difference vectors, got {len(eps)}")
    dim = len(eps[0])
    if any(len(e) != dim for e in eps):
        raise ShapeError("difference vectors differ in length")
    if dim == 0:
        raise ShapeError("difference vectors are empty")
    signs = [sign3(e, tau) for e in eps]
    d = np.array([np.count_nonzero(a != b) / dim for a, b in itertools.combinations(signs, 2)])
    return CorrespondenceResult(float(d.mean()), float(d.std()), layer, part, len(d))


def resolve_part(part, image_id: str | None = None, landmarks: dict | None = None) -> tuple:
    """A half-open ``(y0, x0, y1, x1)`` rectangle from a rect or a named landmark."""
    if isinstance(part, str):
        if landmarks is None or image_id not in landmarks or part not in landmarks[image_id]:
            raise ProbeInputError(f"no annotation for part {part!r} of image {image_id!r}")
        part = landmarks[image_id][part]
    y0, x0, y1, x1 = (int(v) for v in part)
    return y0, x0, y1, x1


def occlude_part(x: np.ndarray, part, fill: float = 0.0, image_id: str | None = None,
                 landmarks: dict | None = None) -> np.ndarray:
    """Replace a half-open rectangle (or a named, annotated part) with ``fill``."""
    x = np.asarray(x, dtype=DTYPE)
    y0, x0, y1, x1 = resolve_part(part, image_id, landmarks)
    h, w = x.shape[-2:]
    if not (0 <= y0 <= y1 <= h and 0 <= x0 <= x1 <= w):
        raise ParameterError(f"rectangle {(y0, x0, y1, x1)} outside {h}x{w} image")
    out = x.copy()
    out[..., y0:y1, x0:x1] = fill
    return out


def part_correspondence(model: Model, images: np.ndarray, parts: list, layer: int, fill: float = 0.0,
                        part_name: str = "") -> CorrespondenceResult:
    """Occlude ``parts[i]`` in ``images[i]`` and score the consistency of the feature changes."""
    if len(images) != len(parts):
        raise ValueError("need one part per image")
    eps = [feature_difference(model, img, occlude_part(img, p, fill), layer) for img, p in zip(images, parts)]
    return correspondence_score(eps, layer=layer, part=part_name)


# -- invariance ---------------------------------------------------------------------------

@dataclass
class InvarianceCurve:
    kind: str
    values: np.ndarray
    unit: str
    distances: dict  # layer -> (len(values),) Euclidean distance to the untransformed features
    true_prob: np.ndarray
    label: int = 0


def invariance_sweep(model: Model, images: np.ndarray, labels, layers: list, kind: str, sweep,
                     order: int = 1, fill: float = 0.0) -> list:
    """One curve per image; out-of-frame pixels take ``fill`` (the mean)."""
    if kind not in UNITS:
        raise ParameterError(f"unknown transform {kind!r}")
    values = np.asarray(list(sweep), dtype=DTYPE)
    if kind == "scale" and np.any(values <= 0):
        raise ParameterError("scale factors must be positive")
    if not np.any(values == IDENTITY[kind]):
        raise ParameterError(f"sweep must include the identity value {IDENTITY[kind]}")
    images = np.asarray(images, dtype=DTYPE)
    ident = int(np.flatnonzero(values == IDENTITY[kind])[0])
    curves = []
    for img, lab in zip(images, labels):
        xs = np.stack([img if v == IDENTITY[kind] else transform_image(img, kind, float(v), fill, order)
                       for v in values])
        rec = net_forward(model.arch, model.params, xs)
        dist = {}
        for l in layers:
            # the reference comes from the same batch so identity is exactly 0
            ref = rec.outputs[l][ident].reshape(1, -1)
            dist[l] = np.sqrt(np.sum((rec.outputs[l].reshape(len(xs), -1) - ref) ** 2, axis=1))
        curves.append(InvarianceCurve(kind, values, UNITS[kind], dist, rec.probs[:, int(lab)], int(lab)))
    return curves


def feature_spread(model: Model, images: np.ndarray, layer: int) -> float:
    """Mean Euclidean distance between the features of distinct images (the baseline spread)."""
    f = model.activations(np.asarray(images, dtype=DTYPE), layer).reshape(len(images), -1)
    if len(f) < 2:
        raise ParameterError("feature spread needs at least 2 images")
    sq = np.sum(f * f, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * f @ f.T, 0.0)
    iu = np.triu_indices(len(f), 1)
    return float(np.mean(np.sqrt(d2[iu])))


# -- report writers ------------------------------------------------------------------------

_RAMP = np.array([[0, 0, 4], [87, 16, 110], [188, 55, 84], [249, 142, 9], [252, 255, 164]], dtype=DTYPE)


def heat_rgb(m: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Map a 2-D array onto a dark-to-bright colour ramp, ``(3, h, w)`` in [0, 255]."""
    m = np.asarray(m, dtype=DTYPE)
    lo = float(m.min()) if lo is None else lo
    hi = float(m.max()) if hi is None else hi
    t = np.zeros_like(m) if hi - lo <= 0 else np.clip((m - lo) / (hi - lo), 0, 1)
    pos = t * (len(_RAMP) - 1)
    i = np.minimum(pos.astype(int), len(_RAMP) - 2)
    f = (pos - i)[..., None]
    rgb = _RAMP[i] * (1 - f) + _RAMP[i + 1] * f
    return rgb.transpose(2, 0, 1)


def palette(n: int) -> np.ndarray:
    """``n`` well-separated colours (golden-angle hues)."""
    import colorsys
    return np.array([[255 * c for c in colorsys.hsv_to_rgb((i * 0.618034) % 1.0, 0.75, 0.95)]
                     for i in range(n)])


def _upscale(img: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(img, factor, axis=-2), factor, axis=-1)


def write_occlusion_report(rep: OcclusionReport, out_dir, prefix: str = "occlusion", class_names=None,
                           cell: int = 16) -> dict:
    """CSV (one row per grid position), heat maps, discrete label map and its legend."""
    from .io import atomic_write, save_image

    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f"{prefix}-{k}") for k in
             ("grid.csv", "prob.png", "act.png", "labels.png", "legend.json")}
    rows = ["gy,gx,y,x,prob,act,label"]
    for gy, y in enumerate(rep.positions):
        for gx, xx in enumerate(rep.positions):
            rows.append(f"{gy},{gx},{y},{xx},{rep.prob_map[gy, gx]:.9g},{rep.act_map[gy, gx]:.9g},"
                        f"{rep.label_map[gy, gx]}")
    atomic_write(paths["grid.csv"], ("\n".join(rows) + "\n").encode())
    save_image(_upscale(heat_rgb(rep.prob_map, 0.0, 1.0), cell), paths["prob.png"])
    save_image(_upscale(heat_rgb(rep.act_map), cell), paths["act.png"])
    present = sorted(set(int(v) for v in rep.label_map.ravel()))
    n = max(present) + 1
    colours = palette(n)
    save_image(_upscale(colours[rep.label_map].transpose(2, 0, 1), cell), paths["labels.png"])
    legend = {str(c): {"name": class_names[c] if class_names else str(c),
                       "rgb": [int(round(v)) for v in colours[c]]} for c in present}
    atomic_write(paths["legend.json"], json.dumps(legend, indent=1).encode())
    return paths


def write_invariance_csv(curves: list, path, ids=None, layer_names: dict | None = None) -> None:
    """One row per image and sweep value; ``layer_names`` relabels the distance columns."""
    layers = sorted(curves[0].distances) if curves else []
    names = {l: (layer_names or {}).get(l, f"layer{l}") for l in layers}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "kind", "value", "unit", "true_prob"] + [f"dist_{names[l]}" for l in layers])
        for n, c in enumerate(curves):
            name = ids[n] if ids else str(n)
            for j, v in enumerate(c.values):
                w.writerow([name, c.kind, f"{v:g}", c.unit, f"{c.true_prob[j]:.9g}"]
                           + [f"{c.distances[l][j]:.9g}" for l in layers])

"""Image codecs, dataset manifests, and the checkpoint / feature-matrix binaries.

Checkpoint layout (all integers little-endian)::

    8s   magic b"CSCKPT\\0\\0"
    u32  version (1)
    u32  n, n bytes     architecture text (utf-8)
    u32  epoch
    u64  seed
    u32  n, n bytes     rng state (JSON)
    u32  count, tensor records        parameters
    u8   has_optimizer; if 1:
         f64 lr, f64 best_val, u32 epochs_since_improvement,
         u32 n, n x f64 lr trace, u32 count, tensor records (velocities)
    u32  count, tensor records        buffers (e.g. the per-pixel mean)
    32s  sha256 of every preceding byte

A tensor record is ``u16 name length, name, u8 ndim, ndim x u32 dims,
prod(dims) x f32``. Values are stored as 32-bit floats (round to nearest).

Feature-matrix layout::

    8s magic b"CSFEAT\\0\\0", u32 version (1), u32 rows, u32 cols, i32 layer,
    32s checkpoint digest, rows*cols x f32 (row-major)
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .arch import ArchitectureSpec
from .data import Dataset
from .imaging import center_crop, resize_short_side

CKPT_MAGIC = b"CSCKPT\0\0"
FEAT_MAGIC = b"CSFEAT\0\0"
CKPT_VERSION = 1
FEAT_VERSION = 1


class CodecError(IOError):
    pass


class CorruptionError(IOError):
    pass


class VersionError(IOError):
    pass


class ManifestError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- images ------------------------------------------------------------------------

def load_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or binary PPM into a ``(3, h, w)`` float array in [0, 255].

    Grayscale is replicated to three channels; alpha is dropped.
    """
    path = str(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "PPM"):
                raise CodecError(f"{path}: unsupported format {im.format}")
            if im.mode in ("I", "I;16", "I;16B", "I;16L", "F", "RGB;16", "RGBA;16"):
                raise CodecError(f"{path}: unsupported bit depth (mode {im.mode})")
            if im.mode == "1":
                im = im.convert("L")
            if im.mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"), dtype=np.float64)
                arr = np.repeat(arr[None], 3, axis=0)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        if isinstance(exc, CodecError):
            raise
        raise CodecError(f"{path}: cannot decode image ({exc})") from None
    return np.ascontiguousarray(arr)


def to_uint8(t: np.ndarray) -> np.ndarray:
    """Clamp to [0, 255] and round half-to-even."""
    return np.rint(np.clip(t, 0, 255)).astype(np.uint8)


def save_image(t: np.ndarray, path) -> None:
    """Write a ``(3, h, w)`` / ``(h, w, 3)`` float image as PNG or PPM (by extension)."""
    arr = np.asarray(t)
    if arr.ndim == 3 and arr.shape[0] == 3:  # channel-first wins when ambiguous
        arr = arr.transpose(1, 2, 0)
    img = Image.fromarray(to_uint8(arr), mode="RGB")
    ext = os.path.splitext(str(path))[1].lower()
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(ext)
    if fmt is None:
        raise CodecError(f"{path}: only .png and .ppm are supported")
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    atomic_write(path, buf.getvalue())


# -- checkpoints ------------------------------------------------------------------------

@dataclass
class Checkpoint:
    arch: ArchitectureSpec
    params: dict
    state: object = None  # trainer.OptimizerState
    epoch: int = 0
    seed: int = 0
    rng_state: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    digest: bytes = b""

    @property
    def hash(self) -> str:
        return self.digest.hex()


def _pack_tensors(out: list, tensors: dict) -> None:
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError("unexpected end of data")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return self.take(n)

    def tensors(self) -> dict:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(self.take(4 * size), dtype="<f4").astype(np.float64).reshape(shape)
            out[name] = arr
        return out


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    arch = ck.arch.to_text().encode("utf-8")
    out.append(struct.pack("<I", len(arch)) + arch)
    out.append(struct.pack("<IQ", ck.epoch, ck.seed))
    rng = json.dumps(ck.rng_state, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(rng)) + rng)
    _pack_tensors(out, ck.params)
    st = ck.state
    if st is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<ddI", st.lr, st.best_val, st.epochs_since_improvement))
        out.append(struct.pack("<I", len(st.lr_trace)) + struct.pack(f"<{len(st.lr_trace)}d", *st.lr_trace))
        _pack_tensors(out, st.velocity)
    _pack_tensors(out, ck.buffers)
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ck: Checkpoint, path) -> str:
    """Write atomically; returns the hex content hash."""
    data = checkpoint_bytes(ck)
    atomic_write(path, data)
    ck.digest = data[-32:]
    return ck.hash


def parse_checkpoint(data: bytes) -> Checkpoint:
    from .trainer import OptimizerState

    if len(data) < len(CKPT_MAGIC) + 4 or data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptionError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CKPT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    if len(data) < 12 + 32:
        raise CorruptionError("checkpoint truncated")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint hash mismatch (file is corrupt or truncated)")
    r = _Reader(body)
    r.take(12)
    arch = ArchitectureSpec.from_text(r.blob().decode("utf-8"))
    epoch, seed = r.unpack("<IQ")
    rng_state = json.loads(r.blob().decode("utf-8"))
    params = r.tensors()
    state = None
    (has_opt,) = r.unpack("<B")
    if has_opt:
        lr, best, since = r.unpack("<ddI")
        (ntrace,) = r.unpack("<I")
        trace = list(r.unpack(f"<{ntrace}d")) if ntrace else []
        state = OptimizerState(r.tensors(), lr, best, since, trace)
    buffers = r.tensors()
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after checkpoint payload")
    expected = arch.param_shapes()
    got = {k: v.shape for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        raise CorruptionError("parameter shapes do not match the embedded architecture")
    return Checkpoint(arch, params, state, epoch, seed, rng_state, buffers, digest)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


# -- feature matrices -----------------------------------------------------------------------

def save_feature_matrix(path, features: np.ndarray, layer: int, checkpoint_digest: bytes) -> None:
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    digest = (checkpoint_digest or b"").ljust(32, b"\0")[:32]
    head = FEAT_MAGIC + struct.pack("<IIIi", FEAT_VERSION, features.shape[0], features.shape[1], layer) + digest
    atomic_write(path, head + np.ascontiguousarray(features, dtype="<f4").tobytes())


def load_feature_matrix(path):
    """Returns ``(features, layer, checkpoint_digest)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != FEAT_MAGIC:
        raise CorruptionError(f"{path}: not a feature matrix")
    version, rows, cols, layer = struct.unpack("<IIIi", data[8:24])
    if version != FEAT_VERSION:
        raise VersionError(f"{path}: unsupported feature-matrix version {version}")
    digest = data[24:56]
    body = data[56:]
    if len(body) != 4 * rows * cols:
        raise CorruptionError(f"{path}: body length {len(body)} != {4 * rows * cols}")
    feats = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(rows, cols)
    return feats, layer, digest


# -- dataset manifests -----------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """JSON manifest: ``{"root", "classes": {name: [files]}, "splits": {split: [files]},
    "mean": optional path, "landmarks": optional path}``. Class indices follow
    the order of ``classes``."""

    root: str
    classes: dict
    splits: dict
    mean: str | None = None
    landmarks: str | None = None
    source_hash: str = ""

    @property
    def class_names(self) -> list:
        return list(self.classes)

    def label_of(self) -> dict:
        return {f: i for i, files in enumerate(self.classes.values()) for f in files}

    def path(self, rel: str) -> str:
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def validate(self, eval_splits=(), decode: bool = True) -> None:
        labels = self.label_of()
        for split, files in self.splits.items():
            for f in files:
                if f not in labels:
                    raise ManifestError(f"split {split!r} lists {f!r}, which belongs to no class")
        for f in labels:
            p = self.path(f)
            if not os.path.exists(p):
                raise ManifestError(f"missing image file {p}")
            if decode:
                load_image(p)
        for split in eval_splits:
            present = {labels[f] for f in self.splits.get(split, [])}
            for i, name in enumerate(self.class_names):
                if i not in present:
                    raise ManifestError(f"class {name!r} has no images in split {split!r}")


def load_manifest(path) -> DatasetManifest:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    root = doc.get("root", ".")
    if not os.path.isabs(root):
        root = os.path.join(os.path.dirname(os.path.abspath(path)), root)
    if not doc.get("classes"):
        raise ManifestError(f"{path}: no classes")
    return DatasetManifest(root, dict(doc["classes"]), dict(doc.get("splits", {})), doc.get("mean"),
                           doc.get("landmarks"), hashlib.sha256(raw).hexdigest())


def write_manifest(path, classes: dict, splits: dict, root: str = ".", **extra) -> None:
    doc = {"root": root, "classes": classes, "splits": splits}
    doc.update({k: v for k, v in extra.items() if v is not None})
    atomic_write(path, json.dumps(doc, indent=1).encode("utf-8"))


def load_split(manifest: DatasetManifest, split: str, target: int) -> Dataset:
    """Decode a split, resizing each image's short side to ``target`` and centre-cropping."""
    labels = manifest.label_of()
    files = manifest.splits.get(split)
    if files is None:
        raise ManifestError(f"no split named {split!r}")
    if not files:
        return Dataset(np.zeros((0, 3, target, target)), np.zeros(0, np.int64), manifest.class_names, [])
    imgs = [center_crop(resize_short_side(load_image(manifest.path(f)), target), target) for f in files]
    return Dataset(np.stack(imgs), [labels[f] for f in files], manifest.class_names, list(files))


def compute_mean(manifest: DatasetManifest, target: int, split: str = "train", cache: bool = True) -> np.ndarray:
    """Per-pixel mean of the resized training split, cached next to the data."""
    cache_path = os.path.join(manifest.root, f".mean-{manifest.source_hash[:16]}-{target}.npy")
    if cache and manifest.source_hash and os.path.exists(cache_path):
        return np.load(cache_path)
    files = manifest.splits.get(split) or []
    if not files:
        raise ManifestError(f"split {split!r} has no images to average")
    total = None
    for f in files:
        img = center_crop(resize_short_side(load_image(manifest.path(f)), target), target)
        if total is None:
            total = np.zeros_like(img)
        elif img.shape != total.shape:
            raise RuntimeError(f"resized image {f} has shape {img.shape}, expected {total.shape}")
        total += img
    mean = total / len(files)
    if cache and manifest.source_hash:
        buf = io.BytesIO()
        np.save(buf, mean)
        atomic_write(cache_path, buf.getvalue())
    return mean


def load_landmarks(path) -> dict:
    """``{image_id: {part name: [y0, x0, y1, x1]}}`` (half-open rectangles)."""
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# -- config files --------------------------------------------------------------------------------------

def load_config(path, section: str) -> dict:
    """Flat ``key = value`` pairs from ``[common]`` then ``[section]`` of an ini-style file."""
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    out = {}
    for name in ("common", section):
        if cp.has_section(name):
            out.update(dict(cp.items(name)))
    return out

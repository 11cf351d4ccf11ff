"""Training: preprocessing, momentum SGD, filter renormalization, annealing."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .arch import ArchitectureSpec, Conv
from .data import Dataset
from .imaging import center_crop, resize_short_side
from .network import init_params, net_backward, net_forward, predict_proba
from .tensor import DTYPE

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    """Raised when the loss or an activation becomes non-finite."""


@dataclass
class TrainConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    batch: int = 128
    dropout_rate: float = 0.5
    weight_init_std: float | None = 1e-2  # None: fan-in scaled
    input_scale: float = 1.0  # multiplies mean-subtracted pixels
    rms_radius: float = 1e-1
    anneal_factor: float = 0.1
    anneal_patience: int = 3
    anneal_threshold: float = 1e-4
    max_epochs: int = 10
    seed: int = 0
    snapshot_epochs: list = field(default_factory=list)
    target: int | None = None  # resize/centre size before cropping; None = network input size
    crops: str = "10crop"  # "10crop" or "center" for training batches

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def desk_config(**overrides) -> TrainConfig:
    """Settings that train the 32x32 desk preset in a few CPU-minutes.

    Pixel-scale input with a fixed 1e-2 init leaves a net this narrow stuck
    at the uniform softmax, so inputs are scaled to unit range and the
    weights get fan-in scaled init.
    """
    base = dict(lr=1e-2, batch=64, max_epochs=5, weight_init_std=None, input_scale=1 / 64)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class OptimizerState:
    velocity: dict
    lr: float
    best_val: float = math.inf
    epochs_since_improvement: int = 0
    lr_trace: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: dict, lr: float) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, lr)


# -- preprocessing -----------------------------------------------------------------

def prepare(image: np.ndarray, target: int, mean: np.ndarray | None) -> np.ndarray:
    """Resize the short side to ``target``, take the centre square, subtract the mean."""
    image = np.asarray(image, dtype=DTYPE)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got {image.shape}")
    if min(image.shape[1:]) < 1:
        raise ValueError("image smaller than one pixel")
    out = center_crop(resize_short_side(image, target), target)
    if mean is not None:
        out = out - mean
    return out


def crop_offsets(target: int, crop: int) -> list:
    """Top-left corners of the four corner crops and the centre crop."""
    e = target - crop
    return [(0, 0), (0, e), (e, 0), (e, e), (e // 2, e // 2)]


def ten_crops(prepared: np.ndarray, crop: int) -> list:
    out = []
    for y, x in crop_offsets(prepared.shape[-1], crop):
        out.append(prepared[:, y : y + crop, x : x + crop].copy())
    out.extend(c[:, :, ::-1].copy() for c in out[:5])
    return out


def preprocess(image: np.ndarray, target: int, crop: int, mean: np.ndarray | None,
               mode: str = "train") -> list:
    """``train`` / ``eval10`` give the 10 corner+centre crops with flips; ``eval`` the centre crop."""
    if crop > target:
        raise ValueError(f"crop {crop} larger than target {target}")
    prepared = prepare(image, target, mean)
    if mode in ("train", "eval10"):
        return ten_crops(prepared, crop)
    if mode == "eval":
        return [center_crop(prepared, crop)]
    raise ValueError(f"unknown preprocessing mode {mode!r}")


def prepare_dataset(ds: Dataset, target: int, mean: np.ndarray | None) -> np.ndarray:
    return np.stack([prepare(img, target, mean) for img in ds.images]) if len(ds) else np.zeros((0, 3, target, target))


def dataset_mean(ds: Dataset, target: int) -> np.ndarray:
    """Per-pixel mean of the resized training images."""
    total = np.zeros((3, target, target))
    for img in ds.images:
        total += prepare(img, target, None)
    return total / max(1, len(ds))


def eval_inputs(ds: Dataset, target: int, crop: int, mean: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return center_crop(prepare_dataset(ds, target, mean), crop) * scale


@dataclass
class Preprocessor:
    """Everything needed to turn raw 0..255 images into network input."""

    mean: np.ndarray  # (3, target, target)
    crop: int
    scale: float = 1.0

    @property
    def target(self) -> int:
        return self.mean.shape[-1]

    def __call__(self, images, mode: str = "eval") -> np.ndarray:
        """Stack of inputs; ``eval10`` returns (n * 10, c, crop, crop), grouped per image."""
        out = [c for img in images for c in preprocess(img, self.target, self.crop, self.mean, mode)]
        if not out:
            return np.zeros((0, 3, self.crop, self.crop))
        return np.stack(out) * self.scale

    def dataset(self, ds: Dataset) -> np.ndarray:
        return eval_inputs(ds, self.target, self.crop, self.mean, self.scale)

    def to_buffers(self) -> dict:
        return {"mean": self.mean, "input_scale": np.array([self.scale])}

    @classmethod
    def from_buffers(cls, buffers: dict, crop: int) -> "Preprocessor":
        if "mean" not in buffers:
            raise ValueError("checkpoint carries no training mean")
        scale = float(buffers["input_scale"][0]) if "input_scale" in buffers else 1.0
        return cls(np.asarray(buffers["mean"], dtype=DTYPE), crop, scale)


# -- optimisation -------------------------------------------------------------------

def sgd_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """Classical momentum: ``v <- m v - lr g``; ``p <- p + v`` (in place)."""
    for name, g in grads.items():
        v = state.velocity[name]
        v *= cfg.momentum
        v -= state.lr * g
        params[name] += v
    return params, state


def rms_renormalize(filters: np.ndarray, radius: float) -> np.ndarray:
    """Rescale every output-channel filter whose RMS exceeds ``radius`` back onto it."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    flat = filters.reshape(filters.shape[0], -1)
    rms = np.sqrt(np.mean(flat * flat, axis=1))
    scale = np.where(rms > radius, radius / np.where(rms > 0, rms, 1.0), 1.0)
    return (flat * scale[:, None]).reshape(filters.shape)


def anneal(state: OptimizerState, val_error_history: list, cfg: TrainConfig) -> OptimizerState:
    """Plateau rule fed with the newest entry of ``val_error_history``.

    When the error has not improved on the best value by more than
    ``anneal_threshold`` for ``anneal_patience`` consecutive epochs the
    learning rate is multiplied by ``anneal_factor`` and the count restarts.
    """
    if not val_error_history:
        raise ValueError("validation history is empty")
    latest = val_error_history[-1]
    if latest < state.best_val - cfg.anneal_threshold:
        state.best_val = latest
        state.epochs_since_improvement = 0
    else:
        state.epochs_since_improvement += 1
        if state.epochs_since_improvement >= cfg.anneal_patience:
            state.lr = min(state.lr, state.lr * cfg.anneal_factor)
            state.epochs_since_improvement = 0
    state.lr_trace.append(state.lr)
    return state


def conv_layer_indices(arch: ArchitectureSpec) -> list:
    return [i for i, layer in enumerate(arch.layers) if isinstance(layer, Conv)]


def renormalize_all(arch: ArchitectureSpec, params: dict, radius: float) -> None:
    for i in conv_layer_indices(arch):
        params[f"{i}.weight"] = rms_renormalize(params[f"{i}.weight"], radius)


def _first_nonfinite(arch, record) -> str:
    for i, out in enumerate(record.outputs):
        if not np.all(np.isfinite(out)):
            return f"layer {i} ({arch.layers[i].kind})"
    return "loss"


def error_rate(arch, params, x, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = predict_proba(arch, params, x).argmax(axis=1)
    return float(np.mean(pred != labels))


# -- the loop -------------------------------------------------------------------------

@dataclass
class TrainResult:
    arch: ArchitectureSpec
    params: dict
    state: OptimizerState
    epoch: int
    seed: int
    rng_state: dict
    prep: Preprocessor
    history: list
    snapshots: dict = field(default_factory=dict)  # epoch -> path

    def to_checkpoint(self):
        from .io import Checkpoint
        return Checkpoint(self.arch, self.params, self.state, self.epoch, self.seed, self.rng_state,
                          buffers=self.prep.to_buffers())


def train(arch: ArchitectureSpec, train_set: Dataset, cfg: TrainConfig, val_set: Dataset | None = None,
          out_dir: str | None = None, on_step=None, log_path: str | None = None) -> TrainResult:
    """Train from scratch; deterministic given ``cfg.seed`` and the data.

    ``on_step(step, params)`` is called after each parameter update.
    """
    if len(train_set) and train_set.labels.max() >= arch.classes:
        raise ValueError(f"label {train_set.labels.max()} out of range for {arch.classes} classes")
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, rng, cfg.weight_init_std)
    state = OptimizerState.fresh(params, cfg.lr)
    crop = arch.input_shape[1]
    target = cfg.target or crop
    prep = Preprocessor(dataset_mean(train_set, target), crop, cfg.input_scale)
    prepared = prepare_dataset(train_set, target, prep.mean) * prep.scale
    val_x = prep.dataset(val_set) if val_set is not None and len(val_set) else None
    offsets = crop_offsets(target, crop)
    n = len(train_set)
    history = []
    val_hist = []
    snapshots = {}
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        which = rng.integers(0, 10, size=n) if cfg.crops == "10crop" else np.full(n, 4)
        loss_sum = 0.0
        wrong = 0
        for s in range(0, n, cfg.batch):
            idx = order[s : s + cfg.batch]
            xb = np.empty((len(idx), 3, crop, crop))
            for j, (k, w) in enumerate(zip(idx, which[s : s + cfg.batch])):
                y0, x0 = offsets[w % 5]
                patch = prepared[k, :, y0 : y0 + crop, x0 : x0 + crop]
                xb[j] = patch[:, :, ::-1] if w >= 5 else patch
            yb = train_set.labels[idx]
            rec = net_forward(arch, params, xb, mode="train", rng=rng)
            loss, probs, grad = L.softmax_xent_batch(rec.logits, yb)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}: "
                                       f"first bad output at {_first_nonfinite(arch, rec)}")
            grads = net_backward(arch, rec, params, grad)
            sgd_step(params, grads, state, cfg)
            renormalize_all(arch, params, cfg.rms_radius)
            loss_sum += loss * len(idx)
            wrong += int(np.sum(probs.argmax(axis=1) != yb))
            step += 1
            if on_step is not None:
                on_step(step, params)
        train_loss = loss_sum / max(1, n)
        train_err = wrong / max(1, n)
        val_err = error_rate(arch, params, val_x, val_set.labels) if val_x is not None else train_err
        val_hist.append(val_err)
        anneal(state, val_hist, cfg)
        row = {"epoch": epoch, "train_loss": train_loss, "train_err": train_err, "val_err": val_err,
               "lr": state.lr}
        history.append(row)
        log.info("epoch %d loss %.4f train_err %.4f val_err %.4f lr %.2e", epoch, train_loss, train_err,
                 val_err, state.lr)
        if out_dir is not None and epoch in cfg.snapshot_epochs:
            from .io import save_checkpoint
            res = TrainResult(arch, params, state, epoch, cfg.seed, rng.bit_generator.state, prep, history)
            path = os.path.join(out_dir, f"snapshot-epoch{epoch:03d}.ckpt")
            save_checkpoint(res.to_checkpoint(), path)
            snapshots[epoch] = path
    if log_path is not None:
        write_log(history, log_path)
    return TrainResult(arch, params, state, cfg.max_epochs, cfg.seed, rng.bit_generator.state, prep, history,
                       snapshots)


def write_log(history: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "train_err", "val_err", "lr"])
        w.writeheader()
        w.writerows(history)

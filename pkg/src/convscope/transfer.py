"""Frozen-feature heads, per-class evaluation, training-size sweeps, ablations."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .arch import ArchitectureError, ArchitectureSpec, Conv, FullyConnected
from .data import Dataset
from .model import Model
from .tensor import DTYPE, ShapeError

log = logging.getLogger(__name__)


class DegenerateProblem(ValueError):
    """Training data holds a single class."""


class EvaluationError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (n, d)
    layer: int  # -1 for the preprocessed input
    source: str = ""  # checkpoint hash
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError("feature matrix must be 2-D")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature matrix holds non-finite values")
        if self.labels is not None and len(self.labels) != len(self.features):
            raise ShapeError("labels and feature rows differ in count")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def extract_features(model: Model, data, layer, batch: int = 256) -> FeatureMatrix:
    """Eval-mode activation of ``layer`` flattened per example.

    ``data`` is a :class:`Dataset` of raw images or an array of network
    input; ``layer="input"`` returns the flattened input itself.
    """
    labels = None
    if isinstance(data, Dataset):
        labels = data.labels
        x = model.inputs(data.images) if len(data) else np.zeros((0,) + model.arch.input_shape)
    else:
        x = np.asarray(data, dtype=DTYPE)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.arch.input_shape:
        raise ShapeError(f"input {x.shape[1:]} does not match architecture input {model.arch.input_shape}")
    if layer == "input":
        return FeatureMatrix(x.reshape(len(x), -1).copy(), -1, model.source, labels)
    layer = int(layer)
    if not 0 <= layer < len(model.arch.layers):
        raise ArchitectureError(f"layer {layer} out of range 0..{len(model.arch.layers) - 1}")
    acts = model.activations(x, layer, batch)
    return FeatureMatrix(acts.reshape(len(x), -1), layer, model.source, labels)


# -- heads ----------------------------------------------------------------------------

@dataclass
class HeadConfig:
    lr: float = 0.1
    epochs: int = 100
    batch: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4  # softmax only
    C: float = 1.0  # svm only
    tol: float = 1e-6  # stop when the epoch loss changes less than this
    seed: int = 0
    standardize: bool = True


@dataclass
class HeadModel:
    kind: str  # "softmax" or "svm"
    weights: np.ndarray  # (classes, d) in standardized feature space
    biases: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    hyper: HeadConfig = field(default_factory=HeadConfig)
    epochs_run: int = 0

    @property
    def classes(self) -> int:
        return self.weights.shape[0]

    def scores(self, feats) -> np.ndarray:
        f = feats.features if isinstance(feats, FeatureMatrix) else np.asarray(feats, dtype=DTYPE)
        if f.shape[1] != self.weights.shape[1]:
            raise ShapeError(f"feature width {f.shape[1]} != head width {self.weights.shape[1]}")
        return ((f - self.mu) / self.sigma) @ self.weights.T + self.biases

    def predict(self, feats) -> np.ndarray:
        return self.scores(feats).argmax(axis=1)


def _standardizer(f: np.ndarray, on: bool):
    if not on:
        return np.zeros(f.shape[1]), np.ones(f.shape[1])
    mu = f.mean(axis=0)
    sigma = f.std(axis=0)
    # constant features carry no signal; leave them at zero
    return mu, np.where(sigma > 1e-12, sigma, 1.0)


def train_head(feats, labels, kind: str = "softmax", hyper: HeadConfig | None = None,
               num_classes: int | None = None) -> HeadModel:
    """Fit a softmax (multinomial logistic) or one-vs-rest linear SVM head by minibatch SGD.

    Deterministic for a given ``hyper.seed``; the feature matrix is never modified.
    """
    hyper = hyper or HeadConfig()
    f = feats.features if isinstance(feats, FeatureMatrix) else np.asarray(feats, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    if len(f) != len(y):
        raise ShapeError("features and labels differ in count")
    if len(np.unique(y)) < 2:
        raise DegenerateProblem("training data must contain at least 2 classes")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    mu, sigma = _standardizer(f, hyper.standardize)
    z = (f - mu) / sigma
    n, d = z.shape
    rng = np.random.default_rng(hyper.seed)
    W = np.zeros((k, d))
    b = np.zeros(k)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    onehot = np.eye(k)[y]
    sign = 2.0 * onehot - 1.0  # one-vs-rest targets in {-1, +1}
    prev = np.inf
    epoch = 0
    for epoch in range(1, hyper.epochs + 1):
        lr = hyper.lr / (1.0 + 0.05 * (epoch - 1))
        order = rng.permutation(n)
        for s in range(0, n, hyper.batch):
            idx = order[s : s + hyper.batch]
            zb = z[idx]
            scores = zb @ W.T + b
            if kind == "softmax":
                p = np.exp(scores - scores.max(axis=1, keepdims=True))
                p /= p.sum(axis=1, keepdims=True)
                g = (p - onehot[idx]) / len(idx)
                gW = g.T @ zb + hyper.weight_decay * W
            elif kind == "svm":
                active = (sign[idx] * scores < 1.0).astype(DTYPE)
                g = -(active * sign[idx]) * (hyper.C / len(idx))
                gW = g.T @ zb + W / n
            else:
                raise ValueError(f"unknown head kind {kind!r}")
            vW = hyper.momentum * vW - lr * gW
            vb = hyper.momentum * vb - lr * g.sum(axis=0)
            W += vW
            b += vb
        loss = _head_loss(kind, z @ W.T + b, y, onehot, sign, W, hyper, n)
        if abs(prev - loss) < hyper.tol:
            break
        prev = loss
    return HeadModel(kind, W, b, mu, sigma, hyper, epoch)


def _head_loss(kind, scores, y, onehot, sign, W, hyper, n) -> float:
    if kind == "softmax":
        m = scores.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
        return float(np.mean(lse - scores[np.arange(len(y)), y]) + 0.5 * hyper.weight_decay * np.sum(W * W))
    hinge = np.maximum(0.0, 1.0 - sign * scores).sum(axis=1)
    return float(hyper.C * np.mean(hinge) + 0.5 * np.sum(W * W) / n)


# -- evaluation ----------------------------------------------------------------------------

def per_class_accuracy(pred, labels, num_classes: int, class_names=None):
    """Unweighted mean of the per-class accuracies, and the per-class vector."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    acc = np.empty(num_classes)
    for c in range(num_classes):
        m = labels == c
        if not np.any(m):
            name = class_names[c] if class_names else str(c)
            raise EvaluationError(f"class {name!r} has no test examples")
        acc[c] = np.mean(pred[m] == c)
    return float(acc.mean()), acc


def evaluate_per_class(head: HeadModel, feats, labels, class_names=None):
    return per_class_accuracy(head.predict(feats), labels, head.classes, class_names)


def sample_per_class(labels, count: int, rng: np.random.Generator, class_names=None) -> np.ndarray:
    """``count`` indices of every class drawn without replacement, returned sorted."""
    labels = np.asarray(labels)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if count > len(idx):
            name = class_names[c] if class_names else str(c)
            raise ValueError(f"class {name!r} has {len(idx)} images, {count} requested")
        picked.append(rng.choice(idx, size=count, replace=False))
    return np.sort(np.concatenate(picked))


@dataclass
class SweepPoint:
    count: int
    mean: float
    std: float
    folds: list  # per-fold mean per-class accuracy


def size_sweep(train: FeatureMatrix, test: FeatureMatrix, counts, folds: int = 5, kind: str = "softmax",
               hyper: HeadConfig | None = None, seed: int = 0, class_names=None) -> list:
    """Accuracy as a function of training images per class; each fold draws a fresh seeded sample."""
    hyper = hyper or HeadConfig()
    k = int(max(train.labels.max(), test.labels.max()) + 1)
    points = []
    for count in counts:
        accs = []
        for fold in range(folds):
            rng = np.random.default_rng([seed, int(count), fold])
            idx = sample_per_class(train.labels, int(count), rng, class_names)
            log.info("size sweep: count %d fold %d uses %d training rows", count, fold, len(idx))
            head = train_head(train.features[idx], train.labels[idx], kind, replace(hyper, seed=hyper.seed + fold),
                              num_classes=k)
            accs.append(evaluate_per_class(head, test, test.labels, class_names)[0])
        points.append(SweepPoint(int(count), float(np.mean(accs)), float(np.std(accs)), accs))
    return points


def write_sweep_csv(points: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["per_class", "mean_acc", "std_acc", "folds"])
        for p in points:
            w.writerow([p.count, f"{p.mean:.6f}", f"{p.std:.6f}", " ".join(f"{a:.6f}" for a in p.folds)])


# -- ablation ----------------------------------------------------------------------------

@dataclass(frozen=True)
class RemoveStages:
    stages: tuple  # 1-based stage numbers


@dataclass(frozen=True)
class ResizeStage:
    stage: int
    size: int  # output maps (conv) or units (fc)


def parse_edit(text: str):
    """``remove 3,4`` or ``resize 3=512,4=1024``."""
    m = re.fullmatch(r"\s*(remove|resize)\s+(.+?)\s*", text)
    if not m:
        raise ArchitectureError(f"bad edit {text!r}; expected 'remove 3,4' or 'resize 3=512'")
    verb, rest = m.groups()
    items = [t.strip() for t in rest.split(",") if t.strip()]
    try:
        if verb == "remove":
            return [RemoveStages(tuple(int(t) for t in items))]
        return [ResizeStage(int(a), int(b)) for a, b in (t.split("=") for t in items)]
    except ValueError:
        raise ArchitectureError(f"bad edit {text!r}") from None


def ablate(arch: ArchitectureSpec, edits) -> ArchitectureSpec:
    """Resize or remove stages (numbered as in the original architecture).

    Downstream widths follow automatically because parameter shapes are
    derived from the revised layer chain, which is validated before return.
    """
    flat = []
    for e in edits:
        flat.extend(parse_edit(e) if isinstance(e, str) else [e])
    stages = arch.stages()
    layers = list(arch.layers)
    last = len(stages)
    drop = set()
    for e in flat:
        nums = e.stages if isinstance(e, RemoveStages) else (e.stage,)
        for s in nums:
            if not 1 <= s <= last:
                raise ArchitectureError(f"stage {s} out of range 1..{last}")
            if s == last:
                raise ArchitectureError("the classifier stage cannot be edited")
        if isinstance(e, RemoveStages):
            for s in e.stages:
                a, z = stages[s - 1]
                drop.update(range(a, z + 1))
        else:
            if e.size < 1:
                raise ArchitectureError(f"stage {e.stage}: size must be >= 1")
            i = stages[e.stage - 1][0]
            if not isinstance(layers[i], (Conv, FullyConnected)):
                raise ArchitectureError(f"stage {e.stage} has no resizable layer")
            layers[i] = replace(layers[i], out=e.size)
    spec = ArchitectureSpec(arch.input_shape, tuple(l for i, l in enumerate(layers) if i not in drop))
    spec.shapes()
    return spec

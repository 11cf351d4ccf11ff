"""Whole-network forward/backward over an :class:`ArchitectureSpec`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .arch import (ArchitectureSpec, Conv, Dropout, Flatten, FullyConnected, Lrn, MaxPool, Relu,
                   SoftmaxClassifier)
from .tensor import DTYPE, ShapeError, as_tensor


@dataclass
class ActivationRecord:
    """Every layer output of one forward pass, plus the pooling switches."""

    input: np.ndarray
    outputs: list = field(default_factory=list)
    switches: dict = field(default_factory=dict)  # layer index -> SwitchMap
    masks: dict = field(default_factory=dict)  # layer index -> dropout mask
    cols: dict = field(default_factory=dict)  # layer index -> im2col matrix (train mode only)
    logits: np.ndarray | None = None
    mode: str = "eval"

    def __len__(self) -> int:
        return len(self.outputs)

    def layer_input(self, i: int) -> np.ndarray:
        return self.input if i == 0 else self.outputs[i - 1]

    @property
    def probs(self) -> np.ndarray:
        out = self.outputs[-1]
        return out.reshape(out.shape[0], -1)


def init_params(arch: ArchitectureSpec, rng: np.random.Generator, std: float | None = 1e-2) -> dict:
    """Zero-mean Gaussian weights, zero biases.

    ``std=None`` picks ``sqrt(2 / fan_in)`` per layer, which small models
    need to get past the uniform-softmax plateau.
    """
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=DTYPE)
        else:
            s = std if std is not None else math.sqrt(2.0 / int(np.prod(shape[1:])))
            params[name] = rng.normal(0.0, s, size=shape).astype(DTYPE)
    return params


def conv_params(arch: ArchitectureSpec, params: dict, i: int) -> L.ConvParams:
    layer = arch.layers[i]
    return L.ConvParams(params[f"{i}.weight"], params[f"{i}.bias"], layer.stride, layer.pad)


def lrn_params(layer: Lrn) -> L.LrnParams:
    return L.LrnParams(layer.n, layer.k, layer.alpha, layer.beta)


def net_forward(arch: ArchitectureSpec, params: dict, x: np.ndarray, mode: str = "eval",
                rng: np.random.Generator | None = None, upto: int | None = None) -> ActivationRecord:
    """Run the network, keeping every intermediate output.

    ``upto`` stops after that layer index (inclusive), which is enough for
    feature extraction and probes that never look at the classifier.
    """
    x = as_tensor(x)
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match architecture input {arch.input_shape}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    rec = ActivationRecord(input=x, mode=mode)
    last = len(arch.layers) - 1 if upto is None else upto
    cur = x
    for i, layer in enumerate(arch.layers[: last + 1]):
        if isinstance(layer, Conv):
            if mode == "train":
                cur, rec.cols[i] = L.conv_forward(cur, conv_params(arch, params, i), return_cols=True)
            else:
                cur = L.conv_forward(cur, conv_params(arch, params, i))
        elif isinstance(layer, Relu):
            cur = L.relu_forward(cur)
        elif isinstance(layer, MaxPool):
            cur, sw = L.maxpool_forward(cur, layer.k, layer.stride, layer.ceil)
            rec.switches[i] = sw
        elif isinstance(layer, Lrn):
            cur = L.lrn_forward(cur, lrn_params(layer))
        elif isinstance(layer, Flatten):
            cur = cur.reshape(cur.shape[0], -1, 1, 1)
        elif isinstance(layer, FullyConnected):
            cur = L.fc_forward(cur, params[f"{i}.weight"], params[f"{i}.bias"])
        elif isinstance(layer, Dropout):
            cur, mask = L.dropout_apply(cur, layer.p, rng, mode)
            rec.masks[i] = mask
        elif isinstance(layer, SoftmaxClassifier):
            logits = L.fc_forward(cur, params[f"{i}.weight"], params[f"{i}.bias"])
            rec.logits = logits.reshape(logits.shape[0], -1)
            cur = L.softmax(rec.logits).reshape(logits.shape)
        rec.outputs.append(cur)
    return rec


def net_backward(arch: ArchitectureSpec, record: ActivationRecord, params: dict, grad_logits: np.ndarray,
                 exclude=(), need_input_grad: bool = False):
    """Backpropagate ``dLoss/dlogits`` through the recorded pass.

    Returns ``{param name: gradient}``. Layers listed in ``exclude`` get no
    entry, and propagation stops below the lowest layer still needing one
    unless ``need_input_grad`` is set, in which case ``(grads, grad_input)``
    is returned.
    """
    exclude = set(exclude)
    trainable = [i for i, layer in enumerate(arch.layers)
                 if isinstance(layer, (Conv, FullyConnected, SoftmaxClassifier)) and i not in exclude]
    lowest = 0 if need_input_grad else (min(trainable) if trainable else len(arch.layers))
    grads = {}
    g = np.asarray(grad_logits, dtype=DTYPE)
    n = record.input.shape[0]
    for i in range(len(arch.layers) - 1, lowest - 1, -1):
        layer = arch.layers[i]
        x_in = record.layer_input(i)
        want = i not in exclude
        if isinstance(layer, SoftmaxClassifier):
            g = g.reshape(n, -1, 1, 1)
            gi, gw, gb = L.fc_backward(x_in, params[f"{i}.weight"], g)
        elif isinstance(layer, FullyConnected):
            gi, gw, gb = L.fc_backward(x_in, params[f"{i}.weight"], g)
        elif isinstance(layer, Conv):
            gi, gw, gb = L.conv_backward(x_in, conv_params(arch, params, i), g, record.cols.get(i),
                                         need_input=i > lowest or need_input_grad)
        else:
            if isinstance(layer, Relu):
                g = L.relu_backward(x_in, g)
            elif isinstance(layer, MaxPool):
                g = L.maxpool_backward(record.switches[i], g)
            elif isinstance(layer, Lrn):
                g = L.lrn_backward(x_in, lrn_params(layer), g)
            elif isinstance(layer, Flatten):
                g = g.reshape(x_in.shape)
            elif isinstance(layer, Dropout):
                if record.mode == "train":
                    g = L.dropout_backward(record.masks[i], layer.p, g)
            continue
        if want:
            grads[f"{i}.weight"] = gw
            grads[f"{i}.bias"] = gb
        g = gi
    if need_input_grad:
        return grads, g
    return grads


def predict_proba(arch: ArchitectureSpec, params: dict, x: np.ndarray, batch: int = 256) -> np.ndarray:
    """Eval-mode class probabilities, ``(n, classes)``."""
    out = [net_forward(arch, params, x[s : s + batch]).probs for s in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)


def layer_activations(arch: ArchitectureSpec, params: dict, x: np.ndarray, layer: int,
                      batch: int = 256) -> np.ndarray:
    """Eval-mode output of layer index ``layer`` for every input."""
    out = [net_forward(arch, params, x[s : s + batch], upto=layer).outputs[layer]
           for s in range(0, len(x), batch)]
    return np.concatenate(out, axis=0)

"""Architecture descriptions, their text grammar, and shape inference.

The text format has one layer per line::

    input c=3 h=224 w=224
    conv out=96 k=7 stride=2 pad=1
    relu
    pool k=3 stride=2 ceil=true
    lrn n=5 k=2 alpha=1e-4 beta=0.75
    flatten
    fc out=4096
    dropout p=0.5
    softmax classes=1000

``#`` starts a comment. The ``input`` line must come first.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import ClassVar

from .layers import conv_out_shape
from .tensor import ShapeError


class ArchitectureError(ValueError):
    """Raised for malformed architecture text or shape-inconsistent layer stacks."""


@dataclass(frozen=True)
class Conv:
    kind: ClassVar[str] = "conv"
    out: int
    k: int
    stride: int = 1
    pad: int = 0


@dataclass(frozen=True)
class Relu:
    kind: ClassVar[str] = "relu"


@dataclass(frozen=True)
class MaxPool:
    kind: ClassVar[str] = "pool"
    k: int
    stride: int
    ceil: bool = False


@dataclass(frozen=True)
class Lrn:
    kind: ClassVar[str] = "lrn"
    n: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75


@dataclass(frozen=True)
class Flatten:
    kind: ClassVar[str] = "flatten"


@dataclass(frozen=True)
class FullyConnected:
    kind: ClassVar[str] = "fc"
    out: int


@dataclass(frozen=True)
class Dropout:
    kind: ClassVar[str] = "dropout"
    p: float = 0.5


@dataclass(frozen=True)
class SoftmaxClassifier:
    kind: ClassVar[str] = "softmax"
    classes: int


LAYER_KINDS = {cls.kind: cls for cls in (Conv, Relu, MaxPool, Lrn, Flatten, FullyConnected, Dropout,
                                          SoftmaxClassifier)}
PARAMETRIC = (Conv, FullyConnected, SoftmaxClassifier)


def _parse_value(text: str, typ):
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    return float(text)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool}
    return {f.name: hints[f.type] if isinstance(f.type, str) else f.type for f in dataclasses.fields(cls)}


def layer_to_text(layer) -> str:
    parts = [layer.kind]
    for f in dataclasses.fields(layer):
        parts.append(f"{f.name}={_format_value(getattr(layer, f.name))}")
    return " ".join(parts)


def layer_from_text(line: str):
    tokens = line.split()
    kind, args = tokens[0], tokens[1:]
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise ArchitectureError(f"unknown layer kind {kind!r}")
    types = _field_types(cls)
    kwargs = {}
    for tok in args:
        if "=" not in tok:
            raise ArchitectureError(f"expected key=value, got {tok!r} in line {line!r}")
        key, value = tok.split("=", 1)
        if key not in types:
            raise ArchitectureError(f"{kind}: unknown key {key!r}")
        try:
            kwargs[key] = _parse_value(value, types[key])
        except ValueError as exc:
            raise ArchitectureError(f"{kind}: bad value for {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ArchitectureError(f"{kind}: {exc}") from None


@dataclass(frozen=True)
class ArchitectureSpec:
    input_shape: tuple  # (c, h, w)
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    # -- text -----------------------------------------------------------------
    def to_text(self) -> str:
        c, h, w = self.input_shape
        lines = [f"input c={c} h={h} w={w}"]
        lines.extend(layer_to_text(layer) for layer in self.layers)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, validate: bool = True) -> "ArchitectureSpec":
        input_shape = None
        layers = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.split()[0] == "input":
                if input_shape is not None or layers:
                    raise ArchitectureError("'input' must appear exactly once, before any layer")
                kv = dict(tok.split("=", 1) for tok in line.split()[1:])
                try:
                    input_shape = (int(kv["c"]), int(kv["h"]), int(kv["w"]))
                except (KeyError, ValueError):
                    raise ArchitectureError(f"bad input line {line!r}") from None
                continue
            if input_shape is None:
                raise ArchitectureError("architecture must start with an 'input' line")
            layers.append(layer_from_text(line))
        if input_shape is None:
            raise ArchitectureError("missing 'input' line")
        spec = cls(input_shape, tuple(layers))
        if validate:
            spec.shapes()
        return spec

    # -- shapes -----------------------------------------------------------------
    def shapes(self) -> list:
        """Output ``(c, h, w)`` of every layer, validating each junction.

        The empty network (no layers at all) is valid; otherwise exactly one
        softmax classifier must close the stack.
        """
        if not self.layers:
            return []
        soft = [i for i, layer in enumerate(self.layers) if isinstance(layer, SoftmaxClassifier)]
        if len(soft) != 1 or soft[0] != len(self.layers) - 1:
            raise ArchitectureError("exactly one softmax classifier is required, as the last layer")
        cur = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                cur = _layer_out(layer, cur)
            except ShapeError as exc:
                raise ArchitectureError(f"layer {i} ({layer_to_text(layer)}) cannot take input "
                                        f"{cur}: {exc}") from None
            out.append(cur)
        return out

    def input_shapes(self) -> list:
        return [self.input_shape] + self.shapes()[:-1]

    def param_shapes(self) -> dict:
        """``{name: shape}`` of every learned tensor, in layer order."""
        result = {}
        for i, (layer, in_shape) in enumerate(zip(self.layers, self.input_shapes())):
            c, h, w = in_shape
            if isinstance(layer, Conv):
                result[f"{i}.weight"] = (layer.out, c, layer.k, layer.k)
                result[f"{i}.bias"] = (layer.out,)
            elif isinstance(layer, FullyConnected):
                result[f"{i}.weight"] = (layer.out, c * h * w)
                result[f"{i}.bias"] = (layer.out,)
            elif isinstance(layer, SoftmaxClassifier):
                result[f"{i}.weight"] = (layer.classes, c * h * w)
                result[f"{i}.bias"] = (layer.classes,)
        return result

    def param_count(self) -> int:
        total = 0
        for shape in self.param_shapes().values():
            n = 1
            for s in shape:
                n *= s
            total += n
        return total

    @property
    def classes(self) -> int:
        return self.layers[-1].classes

    # -- stages -----------------------------------------------------------------
    def stages(self) -> list:
        """Group layers into numbered stages, one per conv / fc / classifier.

        Returns a list of ``(start, end)`` index pairs (inclusive). A trailing
        ``flatten`` is excluded from its stage so a conv stage ends on a map.
        """
        starts = [i for i, layer in enumerate(self.layers) if isinstance(layer, PARAMETRIC)]
        result = []
        for s, nxt in zip(starts, starts[1:] + [len(self.layers)]):
            end = nxt - 1
            while end > s and isinstance(self.layers[end], Flatten):
                end -= 1
            result.append((s, end))
        return result

    def stage_output(self, stage: int) -> int:
        """Layer index holding the output of 1-based ``stage``."""
        st = self.stages()
        if not 1 <= stage <= len(st):
            raise ArchitectureError(f"stage {stage} out of range 1..{len(st)}")
        return st[stage - 1][1]

    def conv_stage_count(self) -> int:
        return sum(isinstance(self.layers[s], Conv) for s, _ in self.stages())


def _layer_out(layer, shape):
    c, h, w = shape
    if isinstance(layer, Conv):
        _, cc, hh, ww = conv_out_shape((1, c, h, w), layer.k, layer.stride, layer.pad, channels=layer.out)
        if hh < 1 or ww < 1:
            raise ShapeError("empty output")
        return (cc, hh, ww)
    if isinstance(layer, MaxPool):
        _, cc, hh, ww = conv_out_shape((1, c, h, w), layer.k, layer.stride, 0, layer.ceil)
        return (cc, hh, ww)
    if isinstance(layer, (Relu, Lrn, Dropout)):
        return shape
    if isinstance(layer, Flatten):
        return (c * h * w, 1, 1)
    if isinstance(layer, FullyConnected):
        return (layer.out, 1, 1)
    if isinstance(layer, SoftmaxClassifier):
        return (layer.classes, 1, 1)
    raise ArchitectureError(f"unsupported layer {layer!r}")


IMAGENET_TEXT = """\
# 8-layer ImageNet model: 224 -> 110 -> 55 in layer 1, 6x6x256 = 9216 before fc6
input c=3 h=224 w=224
conv out=96 k=7 stride=2 pad=1
relu
pool k=3 stride=2 ceil=true
lrn n=5 k=2 alpha=1e-4 beta=0.75
conv out=256 k=5 stride=2 pad=0
relu
pool k=3 stride=2 ceil=true
lrn n=5 k=2 alpha=1e-4 beta=0.75
conv out=384 k=3 stride=1 pad=1
relu
conv out=384 k=3 stride=1 pad=1
relu
conv out=256 k=3 stride=1 pad=1
relu
pool k=3 stride=2 ceil=true
flatten
fc out=4096
relu
dropout p=0.5
fc out=4096
relu
dropout p=0.5
softmax classes=1000
"""

DESK_TEXT = """\
# scaled-down 5-conv model for 32x32 inputs
input c=3 h=32 w=32
conv out=24 k=5 stride=1 pad=2
relu
pool k=3 stride=2 ceil=true
lrn n=5 k=2 alpha=1e-4 beta=0.75
conv out=48 k=3 stride=1 pad=1
relu
pool k=3 stride=2 ceil=true
lrn n=5 k=2 alpha=1e-4 beta=0.75
conv out=64 k=3 stride=1 pad=1
relu
conv out=64 k=3 stride=1 pad=1
relu
conv out=48 k=3 stride=1 pad=1
relu
pool k=3 stride=2 ceil=true
flatten
fc out=256
relu
dropout p=0.5
fc out=256
relu
dropout p=0.5
softmax classes=10
"""

PRESETS = {"imagenet": IMAGENET_TEXT, "desk": DESK_TEXT}


def preset(name: str, classes: int | None = None) -> ArchitectureSpec:
    try:
        spec = ArchitectureSpec.from_text(PRESETS[name])
    except KeyError:
        raise ArchitectureError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if classes is not None:
        spec = ArchitectureSpec(spec.input_shape, spec.layers[:-1] + (SoftmaxClassifier(classes),))
    return spec


def load_architecture(source: str) -> ArchitectureSpec:
    """Resolve a preset name or a path to an architecture text file."""
    if source in PRESETS:
        return preset(source)
    with open(source, encoding="utf-8") as fh:
        return ArchitectureSpec.from_text(fh.read())

"""A trained network bundled with the preprocessing it was trained under."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .arch import ArchitectureSpec
from .network import layer_activations, net_forward, predict_proba
from .trainer import Preprocessor, TrainResult


@dataclass
class Model:
    arch: ArchitectureSpec
    params: dict
    prep: Preprocessor | None = None
    source: str = ""  # checkpoint hash, when loaded from one

    @classmethod
    def from_result(cls, res: TrainResult) -> "Model":
        return cls(res.arch, res.params, res.prep)

    @classmethod
    def from_checkpoint(cls, ck) -> "Model":
        prep = (Preprocessor.from_buffers(ck.buffers, ck.arch.input_shape[1]) if "mean" in ck.buffers else None)
        params = {k: np.asarray(v, dtype=np.float64) for k, v in ck.params.items()}
        return cls(ck.arch, params, prep, ck.hash)

    @classmethod
    def load(cls, path) -> "Model":
        from .io import load_checkpoint
        return cls.from_checkpoint(load_checkpoint(path))

    def inputs(self, images) -> np.ndarray:
        """Raw 0..255 images to centre-crop network input."""
        if self.prep is None:
            raise ValueError("model has no preprocessing buffers")
        return self.prep(images, "eval")

    def proba(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        return predict_proba(self.arch, self.params, x, batch)

    def activations(self, x: np.ndarray, layer: int, batch: int = 256) -> np.ndarray:
        return layer_activations(self.arch, self.params, x, layer, batch)

    def record(self, x: np.ndarray):
        return net_forward(self.arch, self.params, x)

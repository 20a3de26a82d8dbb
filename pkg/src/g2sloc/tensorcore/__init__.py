"""Minimal differentiable tensor substrate: float64 feature maps, a
reverse-mode tape, and the layer primitives the synthesis and pose-refinement
modules are built from."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import io, ops
from .gradcheck import check_gradients, relative_error
from .ops import AttentionParams, mha
from .tape import Gradients, Parameter, Tape, Tensor


@dataclass
class FeatureMap:
    """A C x H x W float64 grid at one pyramid level."""

    data: np.ndarray
    level: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3:
            raise ShapeError("feature map", self.data.shape, ("C", "H", "W"))
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite entries")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def make_linear(rng: np.random.Generator, name: str, d_in: int, d_out: int, zero: bool = False):
    """Weight/bias Parameter pair for a dense layer."""
    if zero:
        weight = np.zeros((d_in, d_out))
    else:
        weight = glorot_uniform(rng, (d_in, d_out), d_in, d_out)
    return Parameter(f"{name}.w", weight), Parameter(f"{name}.b", np.zeros(d_out))


def make_conv(rng: np.random.Generator, name: str, c_in: int, c_out: int, k: int = 3):
    fan_in, fan_out = c_in * k * k, c_out * k * k
    weight = glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out)
    return Parameter(f"{name}.w", weight), Parameter(f"{name}.b", np.zeros(c_out))


def make_attention(rng: np.random.Generator, name: str, dim: int, heads: int) -> AttentionParams:
    pairs = {}
    for proj in ("q", "k", "v", "o"):
        w, b = make_linear(rng, f"{name}.{proj}", dim, dim)
        pairs[f"w_{proj}"] = w
        pairs[f"b_{proj}"] = b
    return AttentionParams(heads=heads, **pairs)


__all__ = [
    "AttentionParams",
    "FeatureMap",
    "Gradients",
    "Parameter",
    "Tape",
    "Tensor",
    "check_gradients",
    "glorot_uniform",
    "io",
    "make_attention",
    "make_conv",
    "make_linear",
    "mha",
    "ops",
    "relative_error",
]

"""Per-part deformation network.

A small tanh MLP maps ``(q_x, q_y, q_z, o)`` to a bounded offset ``v`` in the
primitive's local units and a correction scalar ``c`` in ``[-1, 1]``. The
weights are free parameters optimized per shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad

V_MAX = 0.5
IN_DIM = 4
OUT_DIM = 4


class DeformerOutput(NamedTuple):
    v: np.ndarray
    c: np.ndarray


@dataclass
class DeformerParams:
    """Layer weights ``[(W, b), ...]`` with ``W`` of shape ``(fan_in, fan_out)``."""

    layers: list = field(default_factory=list)
    v_max: float = V_MAX

    def __post_init__(self):
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in self.layers]
        if not self.layers:
            raise ValueError("deformer needs at least one layer")
        prev = IN_DIM
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad shapes W{w.shape} b{b.shape} (expected fan_in {prev})")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite weights")
            prev = w.shape[1]
        if prev != OUT_DIM:
            raise ValueError(f"deformer output width must be {OUT_DIM}, got {prev}")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")

    @property
    def hidden(self) -> int:
        return len(self.layers) - 1

    @property
    def width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def as_callable(self):
        return lambda q, o: forward(self.layers, q, o, self.v_max)

    def __eq__(self, other):
        if not isinstance(other, DeformerParams):
            return NotImplemented
        return (
            self.v_max == other.v_max
            and len(self.layers) == len(other.layers)
            and all(
                np.array_equal(w1, w2) and np.array_equal(b1, b2)
                for (w1, b1), (w2, b2) in zip(self.layers, other.layers)
            )
        )


def param_count(hidden: int = 2, width: int = 32) -> int:
    return (IN_DIM * width + width) + (hidden - 1) * (width * width + width) + (width * OUT_DIM + OUT_DIM)


def layer_shapes(hidden: int = 2, width: int = 32) -> list[tuple[int, int]]:
    dims = [IN_DIM] + [width] * hidden + [OUT_DIM]
    return list(zip(dims[:-1], dims[1:]))


def forward(layers, q, o, v_max: float = V_MAX):
    """Run the MLP on points ``q`` (n, 3) with primitive-field values ``o`` (n,).

    Works on arrays or tape Vars (``layers`` may hold Vars too).
    """
    h = ad.concat([q, ad.reshape(o, (-1, 1))], axis=1)
    for w, b in layers[:-1]:
        h = ad.tanh(ad.dense(h, w, b))
    w, b = layers[-1]
    raw = ad.dense(h, w, b)
    v = ad.tanh(raw[:, 0:3]) * v_max
    c = ad.tanh(raw[:, 3])
    return v, c


def deform(params: DeformerParams, q, o) -> DeformerOutput:
    """Offset and correction at point(s) ``q`` with primitive value(s) ``o``."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    o = np.asarray(o, dtype=np.float64).reshape(-1)
    if np.any((o < 0) | (o > 1)):
        raise ValueError("primitive field value o must lie in [0, 1]")
    v, c = forward(params.layers, q.reshape(-1, 3), o, params.v_max)
    if single:
        return DeformerOutput(v[0], float(c[0]))
    return DeformerOutput(v, c)


def init_deformer(seed: int = 0, scale: float = 1.0, hidden: int = 2, width: int = 32, v_max: float = V_MAX) -> DeformerParams:
    """Uniform fan-in init; the output layer starts at exactly zero."""
    if scale < 0:
        raise ValueError("scale must be >= 0")
    rng = np.random.default_rng(seed)
    shapes = layer_shapes(hidden, width)
    layers = []
    for fan_in, fan_out in shapes[:-1]:
        bound = scale / math.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)))
    fan_in, fan_out = shapes[-1]
    layers.append((np.zeros((fan_in, fan_out)), np.zeros(fan_out)))
    return DeformerParams(layers, v_max)

"""Shape model and its flat, unconstrained parameter vector.

The optimizer works on a single float64 vector. Each part contributes, in
order: raw quaternion (4), translation (3), raw scale (3 for a cuboid, 2 for a
cylinder: radial then axial), confidence logit (1), then every deformer layer
as ``W`` (row-major) followed by ``b``. Constrained values are recovered with

* rotation = raw / |raw|
* scale = S_MIN + softplus(raw)
* confidence = sigmoid(logit)
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import deformer as dfm
from .fields import S_MIN, FieldConfig, Primitive, PrimitiveKind, part_values, stack_columns

_EDGE = 1e-12


@dataclass
class Part:
    primitive: Primitive
    deformer: dfm.DeformerParams

    def __eq__(self, other):
        if not isinstance(other, Part):
            return NotImplemented
        return self.primitive == other.primitive and self.deformer == other.deformer


@dataclass
class ShapeModel:
    parts: list
    config: FieldConfig = field(default_factory=FieldConfig)
    stage: int = 0
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        if not self.parts:
            raise ValueError("a shape model needs at least one part")

    @property
    def n_parts(self) -> int:
        return len(self.parts)

    def with_primitives(self, primitives) -> "ShapeModel":
        parts = [Part(p, part.deformer) for p, part in zip(primitives, self.parts)]
        return replace(self, parts=parts)


def _softplus_inv(y: np.ndarray) -> np.ndarray:
    y = np.maximum(y, _EDGE)
    return y + np.log(-np.expm1(-y))


def _logit(p: float) -> float:
    p = min(max(p, _EDGE), 1.0 - _EDGE)
    return float(np.log(p) - np.log1p(-p))


class ParamLayout:
    """Slices of the flat parameter vector for each part of a model."""

    def __init__(self, model: ShapeModel):
        self.kinds = [part.primitive.kind for part in model.parts]
        self.v_max = [part.deformer.v_max for part in model.parts]
        self.slices = []
        offset = 0

        def take(n):
            nonlocal offset
            sl = slice(offset, offset + n)
            offset += n
            return sl

        for part in model.parts:
            n_scale = 3 if part.primitive.kind is PrimitiveKind.CUBOID else 2
            entry = {
                "rotation": take(4),
                "translation": take(3),
                "scale": take(n_scale),
                "confidence": take(1),
                "layers": [],
            }
            for w, b in part.deformer.layers:
                entry["layers"].append((take(w.size), w.shape, take(b.size)))
            self.slices.append(entry)
        self.size = offset

    def flatten(self, model: ShapeModel) -> np.ndarray:
        theta = np.empty(self.size)
        for entry, part in zip(self.slices, model.parts):
            prim = part.primitive
            theta[entry["rotation"]] = prim.rotation
            theta[entry["translation"]] = prim.translation
            s = prim.scale if prim.kind is PrimitiveKind.CUBOID else prim.scale[[0, 2]]
            theta[entry["scale"]] = _softplus_inv(s - S_MIN)
            theta[entry["confidence"]] = _logit(prim.confidence)
            for (wsl, _, bsl), (w, b) in zip(entry["layers"], part.deformer.layers):
                theta[wsl] = w.ravel()
                theta[bsl] = b
        return theta

    def unflatten(self, theta: np.ndarray, template: ShapeModel) -> ShapeModel:
        parts = []
        for entry, kind, v_max in zip(self.slices, self.kinds, self.v_max):
            rot, trans, scale, rho, layers = self.part_tensors(theta, entry, kind)
            # floor guards against softplus underflow to exactly 0
            scale = np.maximum(scale, S_MIN)
            if kind is PrimitiveKind.CYLINDER:
                scale = np.array([scale[0], scale[0], scale[1]])
            prim = Primitive(kind, rot, trans, scale, float(rho))
            parts.append(Part(prim, dfm.DeformerParams([(w.copy(), b.copy()) for w, b in layers], v_max)))
        return replace(template, parts=parts)

    def part_tensors(self, theta, entry, kind):
        """Constrained per-part quantities from ``theta`` (array or Var)."""
        raw_r = theta[entry["rotation"]]
        rot = raw_r / ad.sqrt(ad.vsum(ad.square(raw_r)))
        trans = theta[entry["translation"]]
        scale = ad.softplus(theta[entry["scale"]]) + S_MIN
        rho = ad.sigmoid(theta[entry["confidence"]])[0]
        layers = [(ad.reshape(theta[wsl], shape), theta[bsl]) for wsl, shape, bsl in entry["layers"]]
        return rot, trans, scale, rho, layers

    def normalize_rotations(self, theta: np.ndarray) -> np.ndarray:
        theta = theta.copy()
        for entry in self.slices:
            r = theta[entry["rotation"]]
            theta[entry["rotation"]] = r / np.linalg.norm(r)
        return theta


@dataclass
class Evaluation:
    """Everything the losses need from one pass of the pipeline."""

    object_values: object  # (n,)
    part_values: object  # (n, M)
    offsets: list  # per part (n, 3) or None
    rotations: list  # per part (4,)


def evaluate(layout: ParamLayout, theta, points, config: FieldConfig, deform: bool = True) -> Evaluation:
    """Run the full pipeline from a flat parameter vector (array or Var)."""
    cols, offsets, rotations = [], [], []
    for entry, kind, v_max in zip(layout.slices, layout.kinds, layout.v_max):
        rot, trans, scale, rho, layers = layout.part_tensors(theta, entry, kind)
        deformer = (lambda q, o, L=layers, vm=v_max: dfm.forward(L, q, o, vm)) if deform else None
        vals, v = part_values(kind, rot, trans, scale, rho, points, config, deformer)
        cols.append(vals)
        offsets.append(v)
        rotations.append(rot)
    part_vals = stack_columns(cols)
    return Evaluation(ad.amax(part_vals, axis=1), part_vals, offsets, rotations)

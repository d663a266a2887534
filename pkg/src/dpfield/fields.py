"""Parameterized primitive fields and their assembly into an occupancy field.

Conventions:

* Quaternions are ``(w, x, y, z)`` and rotate the primitive's local frame into
  the world frame, ``q = R p + t``. Going back uses the transpose.
* The cylinder axis is the local z axis.
* Points are row vectors, arrays of shape ``(n, 3)``.

The functions prefixed with ``_`` and the ``part_values`` family accept either
numpy arrays or :class:`~dpfield.autodiff.Var` objects, so the same code path
serves evaluation and fitting.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

S_MIN = 0.01


class PrimitiveKind(str, enum.Enum):
    CUBOID = "cuboid"
    CYLINDER = "cylinder"

    @classmethod
    def parse(cls, tag) -> "PrimitiveKind":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower())
        except ValueError:
            raise ValueError(f"unknown primitive kind {tag!r}") from None


@dataclass(frozen=True)
class FieldConfig:
    """Decay temperature and weight of the per-point correction scalar."""

    tau: float = 4.0
    correction_weight: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.correction_weight >= 0:
            raise ValueError(f"correction_weight must be >= 0, got {self.correction_weight}")


@dataclass(frozen=True)
class Primitive:
    kind: PrimitiveKind
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    confidence: float = 1.0

    def __post_init__(self):
        kind = PrimitiveKind.parse(self.kind)
        r = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        s = np.asarray(self.scale, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(r)
        if not np.all(np.isfinite(r)) or norm == 0:
            raise ValueError(f"rotation must be a finite non-zero quaternion, got {r}")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"translation must be finite, got {t}")
        if not np.all(np.isfinite(s)) or np.any(s < S_MIN):
            raise ValueError(f"scale components must be finite and >= {S_MIN}, got {s}")
        if kind is PrimitiveKind.CYLINDER and s[0] != s[1]:
            raise ValueError(f"cylinder needs s_x == s_y, got {s}")
        rho = float(self.confidence)
        if not 0.0 <= rho <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {rho}")
        object.__setattr__(self, "kind", kind)
        # leave already-unit quaternions untouched so files round-trip bit-exactly
        object.__setattr__(self, "rotation", r if abs(norm - 1.0) <= 1e-12 else r / norm)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "confidence", rho)

    @classmethod
    def cylinder(cls, radius: float, half_height: float, **kw) -> "Primitive":
        return cls(PrimitiveKind.CYLINDER, scale=[radius, radius, half_height], **kw)

    @property
    def matrix(self) -> np.ndarray:
        return ad.quat_to_matrix(self.rotation)

    def __eq__(self, other):
        if not isinstance(other, Primitive):
            return NotImplemented
        return (
            self.kind is other.kind
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
            and np.array_equal(self.scale, other.scale)
            and self.confidence == other.confidence
        )

    __hash__ = None


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


# -- generic pipeline (arrays or tape Vars) ----------------------------------


def _to_local(points, rotation, translation):
    # row form of R^T (q - t)
    return ad.dense(points - translation, ad.quat_to_matrix(rotation))


def _structural_distance(kind: PrimitiveKind, p, scale):
    """Distance in units of the primitive size; ``scale[0]``/``scale[-1]``
    are the radial/axial scales for a cylinder."""
    if kind is PrimitiveKind.CUBOID:
        return ad.amax(ad.absolute(p) / scale, axis=1)
    radial = ad.sqrt(ad.square(p[:, 0]) + ad.square(p[:, 1])) / scale[0]
    axial = ad.absolute(p[:, 2]) / scale[-1]
    return ad.maximum(radial, axial)


def _normalize(d, tau: float):
    return ad.exp(d * -tau)


def part_values(kind, rotation, translation, scale, confidence, points, config: FieldConfig, deformer=None):
    """Field of one part at ``points``.

    ``deformer`` is ``None`` (pure primitive field) or a callable
    ``(points, o) -> (v, c)``. Returns ``(values, offsets)`` where ``offsets``
    is ``None`` when no deformer ran.
    """
    p = _to_local(points, rotation, translation)
    o = _normalize(_structural_distance(kind, p, scale), config.tau)
    if deformer is None:
        return ad.clamp(o * confidence, 0.0, 1.0), None
    v, c = deformer(points, o)
    od = _normalize(_structural_distance(kind, p + v, scale), config.tau)
    return ad.clamp(od * confidence + c * config.correction_weight, 0.0, 1.0), v


def stack_columns(cols):
    return ad.concat([ad.reshape(c, (-1, 1)) for c in cols], axis=1)


# -- public single-point / batch API ------------------------------------------


def _as_points(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q.reshape(-1, 3)


def world_to_local(primitive: Primitive, q) -> np.ndarray:
    """Map world point(s) ``q`` into the primitive frame, ``R^T (q - t)``."""
    q = np.asarray(q, dtype=np.float64)
    out = _to_local(_as_points(q), primitive.rotation, primitive.translation)
    return out.reshape(q.shape)


def ppf_value(primitive: Primitive, p):
    """Structural distance of local point(s) ``p``: 1 on the surface, < 1 inside."""
    p = np.asarray(p, dtype=np.float64)
    d = _structural_distance(primitive.kind, _as_points(p), primitive.scale)
    return float(d[0]) if p.ndim == 1 else d


def normalize_field(d, config: FieldConfig = FieldConfig()):
    """Occupancy probability ``exp(-tau d)``."""
    if np.any(np.asarray(d) < 0):
        raise ValueError("structural distance must be non-negative")
    out = _normalize(np.asarray(d, dtype=np.float64), config.tau)
    return float(out) if np.ndim(out) == 0 else out


def part_field_value(primitive: Primitive, v, c, q, config: FieldConfig = FieldConfig()):
    """Value of one deformed part at world point(s) ``q`` given offset ``v``
    and correction ``c`` (both per point, or broadcastable)."""
    q = np.asarray(q, dtype=np.float64)
    pts = _as_points(q)
    v = np.broadcast_to(np.asarray(v, dtype=np.float64), pts.shape)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64).reshape(-1), (pts.shape[0],))
    if np.any(np.abs(c) > 1):
        raise ValueError("correction must lie in [-1, 1]")
    values, _ = part_values(
        primitive.kind,
        primitive.rotation,
        primitive.translation,
        primitive.scale,
        primitive.confidence,
        pts,
        config,
        deformer=lambda _q, _o: (v, c),
    )
    return float(values[0]) if q.ndim == 1 else values


def object_field_value(part_vals) -> float:
    """Max-pool per-part values at a point."""
    vals = np.asarray(part_vals, dtype=np.float64).reshape(-1)
    if vals.size == 0:
        raise ValueError("object field needs at least one part")
    return float(np.max(vals))


def eval_part_batch(model, points, deform: bool = True) -> np.ndarray:
    """Per-part field values, shape ``(n, M)``."""
    pts = _as_points(points)
    cols = []
    for part in model.parts:
        prim = part.primitive
        deformer = part.deformer.as_callable() if deform else None
        vals, _ = part_values(
            prim.kind, prim.rotation, prim.translation, prim.scale, prim.confidence, pts, model.config, deformer
        )
        cols.append(vals)
    if not cols:
        raise ValueError("model has no parts")
    return np.stack(cols, axis=1)


def eval_field_batch(model, points, deform: bool = True) -> np.ndarray:
    """Object occupancy at each point; ``deform=False`` skips the deformers."""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        return np.zeros(0)
    return np.max(eval_part_batch(model, pts, deform), axis=1)

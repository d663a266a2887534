"""Procedural targets: unions of boxes and cylinders with semantic labels.

Each part is an analytic solid in its own frame (cylinder axis = local z).
``taper`` scales the cross-section linearly along local z, by ``1 + taper``
at the top face and ``1 - taper`` at the bottom; ``bend`` shifts the
cross-section along local x by ``bend * z^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fields import quat_from_axis_angle
from .geometry import VoxelGrid, voxel_centers

CORPUS_NAMES = ("box1", "table4", "stool3", "taper1", "tbeam")


@dataclass(frozen=True)
class SynthPart:
    kind: str  # "box" or "cylinder"
    center: tuple
    half_extents: tuple  # box: (hx, hy, hz); cylinder: (radius, radius, hz)
    label: int
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    taper: float = 0.0
    bend: float = 0.0

    def __post_init__(self):
        if self.kind not in ("box", "cylinder"):
            raise ValueError(f"unknown part kind {self.kind!r}")
        if self.label < 1:
            raise ValueError("semantic labels start at 1 (0 means empty)")
        if min(self.half_extents) <= 0:
            raise ValueError("half extents must be positive")
        if not -1 < self.taper < 1:
            raise ValueError("taper must lie in (-1, 1)")

    def contains(self, points: np.ndarray) -> np.ndarray:
        r = np.asarray(self.rotation, dtype=np.float64)
        p = (points - np.asarray(self.center)) @ ad.quat_to_matrix(r / np.linalg.norm(r))
        hx, hy, hz = self.half_extents
        px, py, pz = p[:, 0] - self.bend * p[:, 2] ** 2, p[:, 1], p[:, 2]
        f = 1.0 + self.taper * pz / hz
        inside_z = np.abs(pz) <= hz
        if self.kind == "box":
            return inside_z & (np.abs(px) <= hx * f) & (np.abs(py) <= hy * f)
        return inside_z & (np.hypot(px, py) <= hx * f)

    def bounding_radius(self) -> float:
        hx, hy, hz = self.half_extents
        grow = 1.0 + abs(self.taper)
        return math.sqrt((hx * grow + abs(self.bend) * hz * hz) ** 2 + (hy * grow) ** 2 + hz**2)


@dataclass(frozen=True)
class SynthSpec:
    parts: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not self.parts:
            raise ValueError("a synthetic shape needs at least one part")
        for i, part in enumerate(self.parts):
            c = np.asarray(part.center, dtype=np.float64)
            gap = np.maximum(np.abs(c) - 1.0, 0.0)
            if np.linalg.norm(gap) > part.bounding_radius():
                raise ValueError(f"part {i} lies entirely outside [-1, 1]^3")

    @property
    def labels(self) -> list[int]:
        return sorted({p.label for p in self.parts})


def voxelize(spec: SynthSpec, resolution: int) -> VoxelGrid:
    """Binary occupancy at voxel centers plus per-voxel semantic labels.

    Overlaps take the label of the first containing part.
    """
    pts = voxel_centers(resolution)
    labels = np.zeros(len(pts), dtype=np.int64)
    for part in spec.parts:
        hit = (labels == 0) & part.contains(pts)
        labels[hit] = part.label
    if not np.any(labels):
        raise ValueError("synthetic shape has no occupied voxel at this resolution")
    return VoxelGrid.from_flat((labels > 0).astype(np.float64), resolution, labels)


def _table_parts(leg_kind: str = "cylinder"):
    top = SynthPart("box", (0.0, 0.0, 0.5), (0.65, 0.45, 0.07), 1)
    legs = [
        SynthPart(leg_kind, (sx * 0.5, sy * 0.3, -0.16), (0.08, 0.08, 0.6), label)
        for label, (sx, sy) in enumerate([(-1, -1), (1, -1), (-1, 1), (1, 1)], start=2)
    ]
    return [top] + legs


def _stool_parts():
    top = SynthPart("cylinder", (0.0, 0.0, 0.45), (0.55, 0.55, 0.07), 1)
    legs = []
    for label, deg in enumerate((90.0, 215.0, 325.0), start=2):
        a = math.radians(deg)
        legs.append(SynthPart("cylinder", (0.38 * math.cos(a), 0.38 * math.sin(a), -0.185), (0.075, 0.075, 0.565), label))
    return [top] + legs


def builtin_corpus(seed: int = 0) -> list[tuple[str, SynthSpec]]:
    """The five acceptance shapes.

    ``seed=0`` gives the canonical corpus; any other seed jitters part
    centers by up to 0.02 for robustness runs.
    """
    rng = np.random.default_rng(seed)
    tbeam = _table_parts() + [SynthPart("box", (0.0, -0.3, -0.35), (0.45, 0.05, 0.05), 6)]
    shapes = [
        ("box1", [SynthPart("box", (0.05, -0.05, 0.0), (0.55, 0.4, 0.3), 1)]),
        ("table4", _table_parts()),
        ("stool3", _stool_parts()),
        ("taper1", [SynthPart("box", (0.0, 0.0, 0.0), (0.4, 0.4, 0.6), 1, taper=-0.6)]),
        ("tbeam", tbeam),
    ]
    corpus = []
    for name, parts in shapes:
        if seed:
            parts = [
                SynthPart(p.kind, tuple(np.add(p.center, rng.uniform(-0.02, 0.02, 3))), p.half_extents, p.label, p.rotation, p.taper, p.bend)
                for p in parts
            ]
        corpus.append((name, SynthSpec(tuple(parts))))
    return corpus


def corpus_spec(name: str, seed: int = 0) -> SynthSpec:
    for n, spec in builtin_corpus(seed):
        if n == name:
            return spec
    raise KeyError(f"unknown corpus shape {name!r}; choose from {', '.join(CORPUS_NAMES)}")


def rotated_part(kind: str, center, half_extents, label: int, axis, angle: float, **kw) -> SynthPart:
    return SynthPart(kind, tuple(center), tuple(half_extents), label, tuple(quat_from_axis_angle(axis, angle)), **kw)

"""Training losses: reconstruction, deformation, compactness, alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import ParamLayout, ShapeModel, evaluate

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    deform: float = 0.1
    comp: float = 1e-4
    align: float = 1e-4

    def __post_init__(self):
        for name in ("recon", "deform", "comp", "align"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class SampleBatch:
    volume_points: np.ndarray  # (N_omega, 3)
    occupancy: np.ndarray  # (N_omega,) in {0, 1}
    surface_points: np.ndarray  # (N_P, 3)

    def __post_init__(self):
        self.volume_points = np.asarray(self.volume_points, dtype=np.float64).reshape(-1, 3)
        self.occupancy = np.asarray(self.occupancy, dtype=np.float64).reshape(-1)
        self.surface_points = np.asarray(self.surface_points, dtype=np.float64).reshape(-1, 3)
        if len(self.volume_points) < 1:
            raise ValueError("need at least one volume point")
        if len(self.occupancy) != len(self.volume_points):
            raise ValueError("occupancy and volume points differ in length")


@dataclass
class LossReport:
    recon: float
    deform: float
    comp: float
    align: float
    total: float

    def row(self) -> tuple[float, ...]:
        return (self.recon, self.deform, self.comp, self.align, self.total)


def loss_recon(pred, gt, kind: str = "mae"):
    """Mean of per-point ``|pred - gt|`` (``kind="mae"``), or the root of the
    mean squared error (``kind="rmse"``)."""
    gt = np.asarray(gt, dtype=np.float64)
    if np.shape(ad._val(pred)) != gt.shape:
        raise ValueError(f"pred and gt lengths differ: {np.shape(ad._val(pred))} vs {gt.shape}")
    if gt.size < 1:
        raise ValueError("loss_recon needs at least one point")
    diff = pred - gt
    if kind == "mae":
        return ad.mean(ad.absolute(diff))
    if kind == "rmse":
        return ad.sqrt(ad.mean(ad.square(diff)))
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def _norms(v):
    return ad.sqrt(ad.vsum(ad.square(v), axis=-1))


def loss_deform(offsets):
    """``(1/N) sum_j sum_i |v_ji|``.

    ``offsets`` is an ``(N, M, 3)`` array or a list of ``M`` per-part
    ``(N, 3)`` arrays/Vars; ``None`` entries (undeformed parts) count as zero.
    """
    if isinstance(offsets, np.ndarray):
        n = offsets.shape[0]
        return float(np.sum(np.linalg.norm(offsets, axis=-1))) / n
    total, n = 0.0, None
    for v in offsets:
        if v is None:
            continue
        n = np.shape(ad._val(v))[0]
        total = total + ad.vsum(_norms(v))
    if n is None:
        return 0.0
    return total / float(n)


def loss_comp(part_values, eps: float = 1e-6, axis: int = 1):
    """``(sum_i sqrt(mean_j F_i(q_j) + eps))^2``; ``axis`` indexes the points
    (default layout is parts x points)."""
    means = ad.mean(part_values, axis=axis)
    return ad.square(ad.vsum(ad.sqrt(means + eps)))


def loss_align(rotations):
    """Mean distance of each quaternion (sign-canonicalized to w >= 0) from identity."""
    total = 0.0
    for r in rotations:
        sign = -1.0 if ad._val(r)[0] < 0 else 1.0
        total = total + ad.sqrt(ad.vsum(ad.square(r * sign - IDENTITY)))
    return total / float(len(rotations))


def weighted_total(terms, weights: LossWeights):
    recon, deform, comp, align = terms
    return recon * weights.recon + deform * weights.deform + comp * weights.comp + align * weights.align


def loss_terms(layout, theta, batch: SampleBatch, config, weights: LossWeights, deform=True, eps=1e-6, recon_kind="mae"):
    """Evaluate the pipeline on Omega and P and combine the four losses.

    ``theta`` may be an array or a tape Var. Returns ``(total, terms)``.
    """
    n_vol = len(batch.volume_points)
    points = np.concatenate([batch.volume_points, batch.surface_points])
    ev = evaluate(layout, theta, points, config, deform)
    pred = ev.object_values[0:n_vol]
    recon = loss_recon(pred, batch.occupancy, recon_kind)
    dterm = loss_deform([None if v is None else v[0:n_vol] for v in ev.offsets])
    if len(batch.surface_points):
        comp = loss_comp(ev.part_values[n_vol:], eps, axis=0)
    else:
        comp = 0.0
    align = loss_align(ev.rotations)
    terms = (recon, dterm, comp, align)
    return weighted_total(terms, weights), terms


def report_from(total, terms) -> LossReport:
    vals = [float(np.asarray(ad._val(t))) for t in terms]
    return LossReport(*vals, float(np.asarray(ad._val(total))))


def loss_total(batch: SampleBatch, model: ShapeModel, weights: LossWeights = LossWeights(), deform: bool = True, eps: float = 1e-6, recon_kind: str = "mae"):
    """Loss report for ``model`` plus the tape, total node, and parameter leaf.

    Call ``autodiff.backward(tape, total)[theta]`` to get the flat gradient.
    """
    layout = ParamLayout(model)
    tape = ad.Tape()
    theta = tape.leaf(layout.flatten(model))
    total, terms = loss_terms(layout, theta, batch, model.config, weights, deform, eps, recon_kind)
    if not isinstance(total, ad.Var):
        total = ad._lift(tape, total)
    return report_from(total, terms), tape, total, theta

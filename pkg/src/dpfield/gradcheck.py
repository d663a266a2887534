"""Finite-difference verification of the full loss pipeline."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .deformer import DeformerParams, layer_shapes
from .fields import FieldConfig, Primitive, PrimitiveKind, quat_from_axis_angle
from .losses import LossWeights, SampleBatch, loss_terms
from .model import ParamLayout, Part, ShapeModel

TIE_MARGIN = 1e-4
# Richardson-extrapolated central differences at this step keep both the
# truncation error and the float64 rounding noise of an O(1) loss well below
# the 1e-8 denominator floor. Kinks inside the step are caught by branch checks.
STEP = 2e-4


@dataclass
class GradcheckReport:
    worst: float
    errors: list = field(default_factory=list)  # worst error per trial
    resamples: int = 0
    seconds: float = 0.0


def random_model(rng: np.random.Generator, n_parts: int) -> ShapeModel:
    """A random model with non-trivial deformers (output layer non-zero)."""
    parts = []
    hidden = int(rng.integers(1, 3))
    width = int(rng.choice([4, 8, 16]))
    for _ in range(n_parts):
        kind = PrimitiveKind.CUBOID if rng.random() < 0.5 else PrimitiveKind.CYLINDER
        s = rng.uniform(0.2, 0.9, 3)
        if kind is PrimitiveKind.CYLINDER:
            s[1] = s[0]
        rot = quat_from_axis_angle(rng.normal(size=3), rng.uniform(0.1, 2.5))
        prim = Primitive(kind, rot, rng.uniform(-0.4, 0.4, 3), s, rng.uniform(0.3, 0.9))
        layers = [(rng.normal(0, 1 / np.sqrt(a), (a, b)), rng.normal(0, 0.3, b)) for a, b in layer_shapes(hidden, width)]
        parts.append(Part(prim, DeformerParams(layers)))
    config = FieldConfig(tau=float(rng.uniform(2, 6)), correction_weight=float(rng.uniform(0.05, 0.3)))
    return ShapeModel(parts, config)


def random_batch(rng: np.random.Generator, n_volume: int = 64, n_surface: int = 32) -> SampleBatch:
    return SampleBatch(
        rng.uniform(-1, 1, (n_volume, 3)),
        rng.integers(0, 2, n_volume),
        rng.uniform(-1, 1, (n_surface, 3)),
    )


def check_model(model, batch, weights, rng, h=STEP, tie_margin=TIE_MARGIN, max_deformer_coords=24, deform=True) -> float:
    """Worst relative error over all primitive parameters and a random subset
    of deformer weights.

    Raises :class:`autodiff.TieError` when the base point is within
    ``tie_margin`` of a kink or a perturbed point lands on a different
    smooth piece than the base point.
    """
    layout = ParamLayout(model)
    theta = layout.flatten(model)

    def run(t, tape=None):
        x = t if tape is None else tape.leaf(t)
        total, _ = loss_terms(layout, x, batch, model.config, weights, deform)
        return x, total

    base = ad.Tape()
    run(theta, base)
    signature = base.branch_signature()

    def f(t):
        tape = ad.Tape()
        _, total = run(t, tape)
        if tape.branch_signature() != signature:
            raise ad.TieError("perturbation crosses a kink")
        return float(total.value)

    def grad(t):
        tape = ad.Tape()
        x, total = run(t, tape)
        return ad.backward(tape, total)[x]

    def margin(t):
        tape = ad.Tape()
        run(t, tape)
        return tape.min_margin()

    prim_coords, dfm_coords = [], []
    for entry in layout.slices:
        for key in ("rotation", "translation", "scale", "confidence"):
            prim_coords.extend(range(entry[key].start, entry[key].stop))
        for wsl, _, bsl in entry["layers"]:
            dfm_coords.extend(range(wsl.start, wsl.stop))
            dfm_coords.extend(range(bsl.start, bsl.stop))
    if deform and dfm_coords:
        k = min(max_deformer_coords, len(dfm_coords))
        prim_coords.extend(sorted(rng.choice(dfm_coords, size=k, replace=False).tolist()))
    return ad.finite_diff_check(f, grad, theta, h, tie_margin, margin, prim_coords, richardson=True)


def run_gradcheck(trials: int = 100, seed: int = 0, h: float = STEP, tie_margin: float = TIE_MARGIN, max_resamples: int = 1000) -> GradcheckReport:
    """Random full-pipeline configurations with M in {1, 2, 4} and 64 volume
    samples; configurations within ``tie_margin`` of a kink are redrawn."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    errors, resamples = [], 0
    while len(errors) < trials:
        model = random_model(rng, int(rng.choice([1, 2, 4])))
        batch = random_batch(rng)
        weights = LossWeights(*np.exp(rng.uniform(np.log(1e-2), 0.0, 4)))
        try:
            errors.append(check_model(model, batch, weights, rng, h, tie_margin))
        except ad.TieError:
            resamples += 1
            if resamples > max_resamples:
                raise RuntimeError("could not find tie-free configurations") from None
    return GradcheckReport(max(errors) if errors else 0.0, errors, resamples, time.perf_counter() - start)

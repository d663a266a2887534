"""Per-shape fitting of a deformable primitive model to occupancy grids.

Every primitive parameter and deformer weight is a free variable (an
auto-decoder setup, no encoder). Optimization runs in two stages: first
against the 32^3 target, then against the 64^3 target.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .deformer import init_deformer
from .fields import S_MIN, FieldConfig, Primitive, PrimitiveKind
from .geometry import VoxelGrid, voxel_centers
from .losses import LossReport, LossWeights, SampleBatch, loss_terms, report_from
from .model import ParamLayout, Part, ShapeModel

log = logging.getLogger(__name__)

# Learning rate and stage-2 batch size used by the CLI and the acceptance
# runs. FitConfig itself keeps the published values (1e-4, 32768).
DESK_LR = 1e-2
DESK_N_VOLUME = (8192, 8192)

LOG_COLUMNS = ("iter", "stage", "recon", "deform", "comp", "align", "total")


class Mode(str, enum.Enum):
    FULL = "full"
    PPF_ONLY = "ppf-only"

    @classmethod
    def parse(cls, tag) -> "Mode":
        if isinstance(tag, cls):
            return tag
        try:
            return cls(str(tag).lower().replace("_", "-"))
        except ValueError:
            raise ValueError(f"unknown fit mode {tag!r}") from None


@dataclass(frozen=True)
class FitConfig:
    n_parts: int = 8
    primitive_kind: PrimitiveKind = PrimitiveKind.CUBOID
    mode: Mode = Mode.FULL
    epochs: tuple = (2000, 2000)
    n_volume: tuple = (8192, 32768)
    n_surface: int = 1024
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 4.0
    correction_weight: float = 0.1
    comp_eps: float = 1e-6
    recon_kind: str = "mae"
    boundary_fraction: float = 0.5
    deformer_hidden: int = 2
    deformer_width: int = 32
    # Hidden layers wider than the usual 1/sqrt(fan_in) give the deformer
    # varied features from step one; the output layer still starts at zero.
    deformer_init_scale: float = 5.0
    v_max: float = 0.5
    init_confidence: float = 0.5
    init_scale_factor: float = 0.5
    kmeans_iters: int = 20
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitive_kind", PrimitiveKind.parse(self.primitive_kind))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        object.__setattr__(self, "epochs", tuple(int(e) for e in self.epochs))
        object.__setattr__(self, "n_volume", tuple(int(n) for n in self.n_volume))
        if not 1 <= self.n_parts <= 16:
            raise ValueError("n_parts must lie in [1, 16]")
        if len(self.epochs) != 2 or len(self.n_volume) != 2 or min(self.epochs) < 0 or min(self.n_volume) < 1:
            raise ValueError("epochs and n_volume need one non-negative entry per stage")
        if self.lr <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid Adam settings")
        if not 0 <= self.boundary_fraction <= 1:
            raise ValueError("boundary_fraction must lie in [0, 1]")

    @property
    def field_config(self) -> FieldConfig:
        return FieldConfig(self.tau, self.correction_weight)


class FitDivergedError(RuntimeError):
    """Loss or gradient went non-finite; carries the last good model and log."""

    def __init__(self, message, model=None, log_rows=None):
        super().__init__(message)
        self.model = model
        self.log_rows = log_rows or []


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params, grads, lr=1e-4, beta1=0.5, beta2=0.9, eps=1e-8) -> np.ndarray:
    """Bias-corrected Adam update; returns new parameters and advances ``state``.

    A non-finite gradient leaves ``state`` untouched and raises.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and moment shapes differ")
    bad = ~np.isfinite(grads)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise NonFiniteGradientError(f"{idx.size} non-finite gradient entries, first at {idx[:5].tolist()}")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = state.m / (1 - beta1**state.step)
    v_hat = state.v / (1 - beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)


# -- sampling ----------------------------------------------------------------


def boundary_band(occ: np.ndarray, width: int = 2) -> np.ndarray:
    """Voxels within ``width`` voxels (Chebyshev) of the occupancy boundary."""
    cube = np.ones((3, 3, 3), dtype=bool)
    grown = ndimage.binary_dilation(occ, cube, iterations=width)
    shrunk = ndimage.binary_erosion(occ, cube, iterations=width, border_value=0)
    return grown & ~shrunk


def surface_voxels(occ: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty 6-neighbour (outside counts as empty)."""
    padded = np.pad(occ, 1, constant_values=False)
    inner = np.ones_like(occ)
    for axis in range(3):
        for shift in (-1, 1):
            inner &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return occ & ~inner


def _choose(rng, pool: np.ndarray, n: int) -> np.ndarray:
    return rng.choice(pool, size=n, replace=n > len(pool))


class GridSampler:
    """Sampling pools of one target grid, computed once and reused."""

    def __init__(self, grid: VoxelGrid):
        if grid.resolution < 8:
            raise ValueError("grid resolution must be >= 8")
        self.grid = grid
        occ = grid.occupied()
        self.flat_occ = occ.ravel(order="F").astype(np.float64)
        self.band = np.flatnonzero(boundary_band(occ).ravel(order="F"))
        self.surface = np.flatnonzero(surface_voxels(occ).ravel(order="F"))

    def _ijk(self, idx):
        r = self.grid.resolution
        return np.stack([idx % r, (idx // r) % r, idx // (r * r)], axis=1)

    def volume(self, n: int, rng, boundary_fraction: float = 0.5):
        n_band = int(round(n * boundary_fraction)) if self.band.size else 0
        idx = np.concatenate([_choose(rng, np.arange(self.flat_occ.size), n - n_band), _choose(rng, self.band, n_band)])
        pts = -1.0 + (self._ijk(idx) + 0.5) * self.grid.spacing
        return pts, self.flat_occ[idx]

    def surface_points(self, n: int, rng) -> np.ndarray:
        if self.surface.size == 0:
            raise ValueError("target has no surface voxels")
        idx = rng.choice(self.surface, size=n, replace=True)
        return -1.0 + (self._ijk(idx) + rng.random((n, 3))) * self.grid.spacing

    def batch(self, n_volume: int, n_surface: int, rng, boundary_fraction: float = 0.5) -> SampleBatch:
        pts, occ = self.volume(n_volume, rng, boundary_fraction)
        surf = self.surface_points(n_surface, rng) if n_surface else np.zeros((0, 3))
        return SampleBatch(pts, occ, surf)


def sample_volume_points(grid: VoxelGrid, n: int, seed=0, boundary_fraction: float = 0.5):
    """Voxel-center samples with their ground-truth occupancy.

    ``boundary_fraction`` of the samples come from the band within two voxels
    of the occupancy boundary, the rest uniformly from the whole grid. Sampling
    falls back to replacement when a pool is smaller than its share.
    """
    return GridSampler(grid).volume(n, np.random.default_rng(seed), boundary_fraction)


def sample_surface_points(grid: VoxelGrid, n: int, seed=0) -> np.ndarray:
    """Points jittered uniformly inside randomly chosen surface voxels
    (occupied voxels with an empty 6-neighbour)."""
    return GridSampler(grid).surface_points(n, np.random.default_rng(seed))


# -- initialization ----------------------------------------------------------


def kmeans(points: np.ndarray, k: int, seed=0, iters: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Farthest-point seeding followed by exactly ``iters`` Lloyd iterations.

    The first seed is the point farthest from the centroid, each further seed
    the point farthest from all seeds so far. Thin limbs get their own seeds
    this way, which random k-means++ seeding often merges. ``seed`` only
    breaks exact distance ties.
    """
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(0.0, 1e-9, len(points))
    centers = np.empty((k, points.shape[1]))
    d2 = ((points - points.mean(0)) ** 2).sum(1) + jitter
    for j in range(k):
        centers[j] = points[int(np.argmax(d2))]
        dj = ((points - centers[j]) ** 2).sum(1) + jitter
        d2 = dj if j == 0 else np.minimum(d2, dj)
    for _ in range(iters):
        assign = np.argmin(((points[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for j in range(k):
            members = points[assign == j]
            if len(members):
                centers[j] = members.mean(0)
    assign = np.argmin(((points[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    return centers, assign


def init_model(config: FitConfig, grid: VoxelGrid, seed: int | None = None) -> ShapeModel:
    """Primitives at k-means centroids of the occupied voxels, axis aligned,
    sized from each cluster's bounding box; deformers start as the identity."""
    seed = config.seed if seed is None else seed
    occ = grid.occupied().ravel(order="F")
    pts = voxel_centers(grid.resolution)[occ]
    if len(pts) == 0:
        raise ValueError("cannot initialize from an empty grid")
    centers, assign = kmeans(pts, config.n_parts, seed, config.kmeans_iters)
    parts = []
    for j in range(config.n_parts):
        members = pts[assign == j]
        if len(members):
            half = 0.5 * (members.max(0) - members.min(0)) + 0.5 * grid.spacing
        else:
            half = np.full(3, grid.spacing)
        s = np.maximum(config.init_scale_factor * half, S_MIN)
        if config.primitive_kind is PrimitiveKind.CYLINDER:
            s = np.array([max(s[0], s[1]), max(s[0], s[1]), s[2]])
        prim = Primitive(config.primitive_kind, translation=centers[j], scale=s, confidence=config.init_confidence)
        dfm = init_deformer(seed * 1000 + j, config.deformer_init_scale, config.deformer_hidden, config.deformer_width, config.v_max)
        parts.append(Part(prim, dfm))
    return ShapeModel(parts, config.field_config, 0, 0, seed)


# -- fitting -----------------------------------------------------------------


@dataclass
class FitResult:
    model: ShapeModel
    log: list = field(default_factory=list)  # rows matching LOG_COLUMNS


def _loss_and_grad(layout, theta, batch, config: FitConfig):
    tape = ad.Tape()
    leaf = tape.leaf(theta)
    total, terms = loss_terms(
        layout, leaf, batch, config.field_config, config.weights,
        deform=config.mode is Mode.FULL, eps=config.comp_eps, recon_kind=config.recon_kind,
    )
    report = report_from(total, terms)
    if not np.isfinite(report.total):
        return report, None
    return report, ad.backward(tape, total)[leaf]


def fit(
    target32: VoxelGrid,
    target64: VoxelGrid | None,
    config: FitConfig = FitConfig(),
    init: ShapeModel | None = None,
    checkpoint: Callable[[ShapeModel, int], None] | None = None,
) -> FitResult:
    """Fit a model to ``target32`` then ``target64``.

    Each iteration draws a fresh batch of volume and surface samples and takes
    one Adam step. ``checkpoint(model, iteration)`` is called every
    ``config.checkpoint_every`` iterations when both are set.
    """
    stages = [(1, target32, config.n_volume[0], config.epochs[0])]
    if target64 is not None:
        stages.append((2, target64, config.n_volume[1], config.epochs[1]))
    elif config.epochs[1]:
        raise ValueError("stage 2 has epochs but no 64^3 target was given")
    model = init if init is not None else init_model(config, target32)
    layout = ParamLayout(model)
    theta = layout.flatten(model)
    state = AdamState.zeros(layout.size)
    rng = np.random.default_rng([config.seed, 0x5EED])
    rows: list = []
    it = 0
    if sum(e for *_, e in stages) == 0:
        return FitResult(model, rows)
    stage = 0
    for stage, grid, n_vol, epochs in stages:
        sampler = GridSampler(grid) if epochs else None
        for _ in range(epochs):
            batch = sampler.batch(n_vol, config.n_surface, rng, config.boundary_fraction)
            report, grads = _loss_and_grad(layout, theta, batch, config)
            if grads is None:
                raise FitDivergedError(f"loss became non-finite at iteration {it}", _snapshot(layout, theta, model, stage, it), rows)
            try:
                theta = adam_step(state, theta, grads, config.lr, config.beta1, config.beta2, config.adam_eps)
            except NonFiniteGradientError as exc:
                raise FitDivergedError(f"iteration {it}: {exc}", _snapshot(layout, theta, model, stage, it), rows) from exc
            theta = layout.normalize_rotations(theta)
            rows.append((it, stage) + report.row())
            it += 1
            if checkpoint is not None and config.checkpoint_every and it % config.checkpoint_every == 0:
                checkpoint(_snapshot(layout, theta, model, stage, it), it)
            if it % 500 == 0:
                log.info("iter %d stage %d total %.6f recon %.6f", it, stage, report.total, report.recon)
    return FitResult(_snapshot(layout, theta, model, stage, it), rows)


def _snapshot(layout, theta, template, stage, it) -> ShapeModel:
    model = layout.unflatten(theta, template)
    return replace(model, stage=stage, iteration=it)

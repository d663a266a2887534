"""Shape-level evaluation of a fitted model against a labeled target grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    DEFAULT_ISO,
    LabeledPoints,
    VoxelGrid,
    chamfer_distance,
    downsample_majority,
    majority_mapping,
    marching_cubes,
    miou,
    rasterize_field,
    sample_mesh_surface,
    segment_points,
    voxel_iou,
)
from .model import ShapeModel

N_SURFACE_SAMPLES = 4096
MESH_RES = 64


@dataclass(frozen=True)
class ShapeMetrics:
    cd_x1000: float
    iou32: float
    miou: float

    def rows(self) -> list[tuple[str, float]]:
        return [("cd_x1000", self.cd_x1000), ("iou32", self.iou32), ("miou", self.miou)]


def grid_at_32(grid: VoxelGrid) -> VoxelGrid:
    res = grid.resolution
    while res > 32:
        grid = downsample_majority(grid)
        res = grid.resolution
    if res != 32:
        raise ValueError(f"cannot bring a {grid.resolution}^3 grid to 32^3")
    return grid


def chamfer_x1000(model: ShapeModel, gt: VoxelGrid, seed: int = 0, deform: bool = True) -> float:
    """Chamfer distance between the 0.6-isosurface of the model (at 64^3) and
    the 0.5-isosurface of the target, scaled by 1000. NaN if the model
    surface is empty."""
    mesh = marching_cubes(rasterize_field(model, MESH_RES, deform), DEFAULT_ISO)
    if mesh.is_empty:
        return math.nan
    gmesh = marching_cubes(gt, 0.5)
    a = sample_mesh_surface(mesh, N_SURFACE_SAMPLES, seed)
    b = sample_mesh_surface(gmesh, N_SURFACE_SAMPLES, seed + 1)
    return 1000.0 * chamfer_distance(a, b)


def segmentation_miou(model: ShapeModel, gt: VoxelGrid, deform: bool = True) -> float:
    """m-IoU over occupied target voxel centers, parts mapped by majority vote."""
    if gt.labels is None:
        return math.nan
    occ = gt.occupied().ravel(order="F")
    pts = gt.centers()[occ]
    truth = LabeledPoints(pts, gt.labels.ravel(order="F")[occ])
    pred = segment_points(model, pts, deform)
    return miou(pred, truth, majority_mapping(pred, truth))


def shape_metrics(model: ShapeModel, gt: VoxelGrid, seed: int = 0, deform: bool = True) -> ShapeMetrics:
    if not np.any(gt.occupied()):
        raise ValueError("target grid is empty")
    iou = voxel_iou(rasterize_field(model, 32, deform), grid_at_32(gt))
    return ShapeMetrics(chamfer_x1000(model, gt, seed, deform), iou, segmentation_miou(model, gt, deform))

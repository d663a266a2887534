"""Deformable primitive fields: part-based implicit shapes fitted to voxel grids."""

from .deformer import DeformerOutput, DeformerParams, deform, init_deformer
from .estimator import PrimitiveFieldEstimator
from .fields import (
    FieldConfig,
    Primitive,
    PrimitiveKind,
    eval_field_batch,
    eval_part_batch,
    normalize_field,
    object_field_value,
    part_field_value,
    ppf_value,
    world_to_local,
)
from .fitter import FitConfig, FitResult, Mode, fit
from .geometry import Mesh, VoxelGrid, chamfer_distance, marching_cubes, miou, voxel_iou
from .io import FormatError, load_grid, load_model, save_grid, save_model
from .losses import LossReport, LossWeights
from .model import Part, ShapeModel

__version__ = "0.1.0"

__all__ = [
    "DeformerOutput",
    "DeformerParams",
    "FieldConfig",
    "FitConfig",
    "FitResult",
    "FormatError",
    "LossReport",
    "LossWeights",
    "Mesh",
    "Mode",
    "Part",
    "Primitive",
    "PrimitiveFieldEstimator",
    "PrimitiveKind",
    "ShapeModel",
    "VoxelGrid",
    "chamfer_distance",
    "deform",
    "eval_field_batch",
    "eval_part_batch",
    "fit",
    "init_deformer",
    "load_grid",
    "load_model",
    "marching_cubes",
    "miou",
    "normalize_field",
    "object_field_value",
    "part_field_value",
    "ppf_value",
    "save_grid",
    "save_model",
    "voxel_iou",
    "world_to_local",
]

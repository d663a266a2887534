"""scikit-learn style wrapper around :func:`dpfield.fitter.fit`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .fields import eval_field_batch, eval_part_batch
from .fitter import DESK_LR, DESK_N_VOLUME, FitConfig, fit
from .geometry import VoxelGrid, rasterize_field, segment_points, voxel_iou
from .losses import LossWeights
from .metrics import grid_at_32


def check_grid(X, name: str = "X") -> VoxelGrid:
    """Accept a :class:`VoxelGrid` or a cubic array of occupancies in [0, 1]."""
    if isinstance(X, VoxelGrid):
        return X
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3 or len(set(arr.shape)) != 1:
        raise ValueError(f"{name} must be a cubic 3-D occupancy array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return VoxelGrid(arr)


def check_points(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
    return X


class PrimitiveFieldEstimator(BaseEstimator):
    """Fit a deformable primitive model to one occupancy grid.

    ``fit(X, X_fine=None)`` takes a 32^3 target and an optional 64^3 target
    for the second stage. ``predict`` returns occupancy at query points,
    ``transform`` the per-part field values (one column per part), and
    ``predict_parts`` the index of the dominant part.
    """

    def __init__(
        self,
        n_parts=8,
        primitive="cuboid",
        mode="full",
        epochs=(2000, 2000),
        n_volume=DESK_N_VOLUME,
        n_surface=1024,
        lr=DESK_LR,
        weights=None,
        tau=4.0,
        random_state=0,
    ):
        self.n_parts = n_parts
        self.primitive = primitive
        self.mode = mode
        self.epochs = epochs
        self.n_volume = n_volume
        self.n_surface = n_surface
        self.lr = lr
        self.weights = weights
        self.tau = tau
        self.random_state = random_state

    def _config(self, has_fine: bool) -> FitConfig:
        epochs = tuple(self.epochs)
        return FitConfig(
            n_parts=self.n_parts,
            primitive_kind=self.primitive,
            mode=self.mode,
            epochs=(epochs[0], epochs[1] if has_fine else 0),
            n_volume=tuple(self.n_volume),
            n_surface=self.n_surface,
            lr=self.lr,
            seed=int(self.random_state or 0),
            weights=self.weights if self.weights is not None else LossWeights(),
            tau=self.tau,
        )

    def fit(self, X, y=None, X_fine=None):
        coarse = check_grid(X)
        if coarse.resolution != 32:
            coarse = grid_at_32(coarse)
        fine = check_grid(X_fine, "X_fine") if X_fine is not None else None
        result = fit(coarse, fine, self._config(fine is not None))
        self.model_ = result.model
        self.log_ = np.asarray(result.log, dtype=np.float64).reshape(-1, 7)
        self.n_features_in_ = 3
        return self

    @property
    def _deform(self) -> bool:
        return self.mode == "full"

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return eval_field_batch(self.model_, check_points(X), self._deform)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return eval_part_batch(self.model_, check_points(X), self._deform)

    def predict_parts(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return segment_points(self.model_, check_points(X), self._deform).labels

    def score(self, X, y=None) -> float:
        """IoU at 32^3 against the target grid ``X``."""
        check_is_fitted(self, "model_")
        gt = grid_at_32(check_grid(X))
        return voxel_iou(rasterize_field(self.model_, 32, self._deform), gt)

"""Voxel grids, isosurfaces, surface sampling and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .fields import eval_field_batch, eval_part_batch

DEFAULT_ISO = 0.6
_CHUNK = 32768


@dataclass
class VoxelGrid:
    """Cubic grid over ``[-1, 1]^3``; ``values[i, j, k]`` sits at voxel
    center ``(x_i, y_j, z_k)``. ``labels`` is an optional parallel int grid."""

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 1:
            raise ValueError(f"grid values must be a cube, got shape {v.shape}")
        if not np.all((v >= 0) & (v <= 1)):
            raise ValueError("grid values must lie in [0, 1]")
        self.values = v
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != v.shape:
                raise ValueError("labels must match the grid shape")
            self.labels = lab.astype(np.int64)

    @classmethod
    def from_flat(cls, flat, resolution: int, labels=None) -> "VoxelGrid":
        """Build from x-fastest flat arrays."""
        shape = (resolution,) * 3
        vals = np.asarray(flat, dtype=np.float64).reshape(shape, order="F")
        lab = None if labels is None else np.asarray(labels).reshape(shape, order="F")
        return cls(vals, lab)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return 2.0 / self.resolution

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def occupied(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold

    def centers(self) -> np.ndarray:
        """Voxel centers in x-fastest order, shape ``(R^3, 3)``."""
        return voxel_centers(self.resolution)


def voxel_centers(resolution: int) -> np.ndarray:
    c = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def index_to_world(idx, resolution: int) -> np.ndarray:
    return -1.0 + (np.asarray(idx, dtype=np.float64) + 0.5) * (2.0 / resolution)


def downsample_majority(grid: VoxelGrid) -> VoxelGrid:
    """Halve the resolution; a coarse voxel is occupied when at least 4 of its
    8 children are."""
    r = grid.resolution
    if r % 2:
        raise ValueError("resolution must be even to downsample")
    occ = grid.occupied().reshape(r // 2, 2, r // 2, 2, r // 2, 2)
    counts = occ.sum(axis=(1, 3, 5))
    return VoxelGrid((counts >= 4).astype(np.float64))


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        t = self.triangles
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle with a repeated vertex index")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class LabeledPoints:
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.labels):
            raise ValueError("points and labels differ in length")


def rasterize_field(model, resolution: int, deform: bool = True) -> VoxelGrid:
    """Object field sampled at every voxel center."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    pts = voxel_centers(resolution)
    out = np.concatenate([eval_field_batch(model, pts[i : i + _CHUNK], deform) for i in range(0, len(pts), _CHUNK)])
    return VoxelGrid.from_flat(out, resolution)


def marching_cubes(grid: VoxelGrid, k: float = DEFAULT_ISO) -> Mesh:
    """Triangle mesh of the ``k`` level set in world coordinates.

    The grid is padded with zeros so the surface closes at the domain edge.
    """
    if not 0 < k < 1:
        raise ValueError("iso level must lie in (0, 1)")
    vol = np.pad(grid.values, 1, constant_values=0.0)
    if vol.max() < k or vol.min() > k:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vol, level=k)
    verts = index_to_world(verts - 1.0, grid.resolution)
    good = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    return Mesh(verts, faces[good])


def sample_mesh_surface(mesh: Mesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return (1 - su)[:, None] * a + (su * (1 - v))[:, None] * b + (su * v)[:, None] * c


def _sqdist(a, b):
    return ((a - b) ** 2).sum(axis=-1)


def _nearest_sq_brute(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty(len(a))
    step = max(1, 4_000_000 // max(len(b), 1))
    for i in range(0, len(a), step):
        out[i : i + step] = _sqdist(a[i : i + step, None, :], b[None, :, :]).min(axis=1)
    return out


def _nearest_sq_tree(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = min(4, len(b))
    _, idx = cKDTree(b).query(a, k=k)
    idx = idx.reshape(len(a), k)
    # recompute with the brute-force formula; the k candidates absorb rounding in the tree
    return _sqdist(a[:, None, :], b[idx]).min(axis=1)


def chamfer_distance(a, b, method: str = "tree") -> float:
    """Sum of the two directed mean squared nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs non-empty point sets")
    nearest = {"tree": _nearest_sq_tree, "brute": _nearest_sq_brute}[method]
    return float(nearest(a, b).mean() + nearest(b, a).mean())


def voxel_iou(pred: VoxelGrid, gt: VoxelGrid, threshold: float = 0.5) -> float:
    """IoU of binarized grids; two empty grids score 1.0."""
    if pred.resolution != gt.resolution:
        raise ValueError("grids differ in resolution")
    p = pred.occupied(threshold)
    g = gt.occupied(0.5)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def segment_points(model, points, deform: bool = True) -> LabeledPoints:
    """Label each point with the part of largest field value (lowest index on ties)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    labels = np.empty(len(pts), dtype=np.int64)
    for i in range(0, len(pts), _CHUNK):
        labels[i : i + _CHUNK] = np.argmax(eval_part_batch(model, pts[i : i + _CHUNK], deform), axis=1)
    return LabeledPoints(pts, labels)


def majority_mapping(pred: LabeledPoints, gt: LabeledPoints) -> dict[int, int]:
    """Map each predicted part to the ground-truth label most of its points carry
    (smallest label on ties)."""
    mapping = {}
    for part in np.unique(pred.labels):
        labs, counts = np.unique(gt.labels[pred.labels == part], return_counts=True)
        mapping[int(part)] = int(labs[np.argmax(counts)])
    return mapping


def miou(pred: LabeledPoints, gt: LabeledPoints, mapping: dict[int, int] | None = None) -> float:
    """Mean over ground-truth labels of the per-label point IoU.

    Predicted part ids are translated through ``mapping`` (identity if
    omitted); parts missing from the mapping map to -1.
    """
    if len(pred.labels) != len(gt.labels):
        raise ValueError("point sets differ in size")
    if mapping is None:
        sem = pred.labels
    else:
        sem = np.array([mapping.get(int(p), -1) for p in pred.labels], dtype=np.int64)
    ious = []
    for lab in np.unique(gt.labels):
        p = sem == lab
        g = gt.labels == lab
        ious.append(np.count_nonzero(p & g) / np.count_nonzero(p | g))
    return float(np.mean(ious))

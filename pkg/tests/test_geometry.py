import math

import numpy as np
import pytest

from conftest import random_model, single_part_model
from dpfield.fields import Primitive, eval_field_batch, eval_part_batch
from dpfield.geometry import (
    LabeledPoints,
    Mesh,
    VoxelGrid,
    chamfer_distance,
    downsample_majority,
    majority_mapping,
    marching_cubes,
    miou,
    rasterize_field,
    sample_mesh_surface,
    segment_points,
    voxel_centers,
    voxel_iou,
)


def test_rasterize_empty_model():
    model = single_part_model(Primitive("cuboid", confidence=0.0))
    assert rasterize_field(model, 16, deform=False).values.max() < 1e-9


def test_rasterize_matches_batch(rng):
    model = random_model(rng, 2)
    grid = rasterize_field(model, 16)
    np.testing.assert_array_equal(grid.flat(), eval_field_batch(model, voxel_centers(16)))


def test_rasterize_center_voxel():
    # center of voxel (16, 16, 16) at 32^3
    c = -1 + (16 + 0.5) * 2 / 32
    model = single_part_model(Primitive("cuboid", translation=[c, c, c], scale=[0.3, 0.3, 0.3]))
    assert rasterize_field(model, 32).values[16, 16, 16] == 1.0


def test_flat_order_is_x_fastest():
    g = VoxelGrid(np.zeros((4, 4, 4)))
    g.values[1, 0, 0] = 1
    assert g.flat()[1] == 1
    np.testing.assert_array_equal(g.centers()[1], [-0.25, -0.75, -0.75])


def test_marching_cubes_constant_below():
    assert marching_cubes(VoxelGrid(np.full((8, 8, 8), 0.2)), 0.6).is_empty


def test_marching_cubes_sphere():
    res, r = 48, 0.55
    c = voxel_centers(res)
    rad = np.linalg.norm(c, axis=1)
    vals = np.exp(-np.maximum(rad - r, 0) * 4)  # 1 inside r, smooth falloff
    grid = VoxelGrid.from_flat(vals, res)
    mesh = marching_cubes(grid, 0.6)
    iso_r = r - math.log(0.6) / 4
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(radii - iso_r) < 1.5 * grid.spacing)


def test_unit_cuboid_iso_extent():
    model = single_part_model(Primitive("cuboid"))
    grid = rasterize_field(model, 64, deform=False)
    mesh = marching_cubes(grid, 0.6)
    half = (mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)) / 2
    target = -math.log(0.6) / 4
    assert np.all(np.abs(half - target) < 1.5 * grid.spacing)


def test_surface_samples_in_triangle():
    tri = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    pts = sample_mesh_surface(Mesh(tri, np.array([[0, 1, 2]])), 2000, 3)
    assert np.all(pts[:, 0] >= -1e-12) and np.all(pts[:, 1] >= -1e-12)
    assert np.all(pts.sum(axis=1)[:, None] <= 1 + 1e-12) and np.all(pts[:, 2] == 0)


def test_surface_samples_area_weighted():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]])
    # areas 1 and 3
    mesh = Mesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    pts = sample_mesh_surface(mesh, 100_000, 0)
    assert abs(np.mean(pts[:, 0] >= 4) - 0.75) < 0.03


def test_surface_samples_deterministic():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    mesh = Mesh(v, np.array([[0, 1, 2]]))
    np.testing.assert_array_equal(sample_mesh_surface(mesh, 50, 9), sample_mesh_surface(mesh, 50, 9))


def test_degenerate_triangle_rejected():
    with pytest.raises(ValueError):
        Mesh(np.zeros((3, 3)), np.array([[0, 0, 1]]))


def test_chamfer_examples():
    a = np.random.default_rng(0).uniform(size=(20, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[1, 0, 0]]) == 2.0


def test_chamfer_tree_equals_brute():
    rng = np.random.default_rng(11)
    for _ in range(5):
        a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3))
        assert chamfer_distance(a, b, "tree") == chamfer_distance(a, b, "brute")


def _box_grid(res, lo, hi):
    v = np.zeros((res, res, res))
    v[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = 1
    return VoxelGrid(v)


def test_voxel_iou_examples():
    a = _box_grid(8, (0, 0, 0), (4, 4, 4))
    assert voxel_iou(a, a) == 1.0
    assert voxel_iou(a, _box_grid(8, (4, 4, 4), (8, 8, 8))) == 0.0
    assert voxel_iou(a, _box_grid(8, (2, 0, 0), (6, 4, 4))) == pytest.approx(1 / 3)
    empty = VoxelGrid(np.zeros((8, 8, 8)))
    assert voxel_iou(empty, empty) == 1.0


def test_downsample_majority():
    g = _box_grid(8, (0, 0, 0), (4, 4, 4))
    d = downsample_majority(g)
    assert d.resolution == 4 and d.values.sum() == 8


def test_segment_single_part(rng):
    model = single_part_model(Primitive("cuboid"))
    assert not segment_points(model, rng.uniform(-1, 1, (50, 3))).labels.any()


def test_segment_two_parts():
    from dpfield.model import ShapeModel

    a = single_part_model(Primitive("cuboid", translation=[-0.5, 0, 0], scale=[0.2] * 3))
    b = single_part_model(Primitive("cuboid", translation=[0.5, 0, 0], scale=[0.2] * 3))
    model = ShapeModel(a.parts + b.parts)
    assert segment_points(model, [[0.5, 0, 0]]).labels[0] == 1


def test_segment_matches_loop(rng):
    model = random_model(rng, 4)
    pts = rng.uniform(-1, 1, (1000, 3))
    loop = [int(np.argmax(eval_part_batch(model, p[None])[0])) for p in pts]
    np.testing.assert_array_equal(segment_points(model, pts).labels, loop)


def test_miou_examples():
    pts = np.zeros((4, 3))
    gt = LabeledPoints(pts, [1, 1, 2, 2])
    assert miou(LabeledPoints(pts, [1, 1, 2, 2]), gt) == 1.0
    assert miou(LabeledPoints(pts, [1, 1, 1, 1]), gt) == 0.25


def test_miou_permutation_invariant():
    rng = np.random.default_rng(4)
    pts = np.zeros((200, 3))
    gt = LabeledPoints(pts, rng.integers(1, 4, 200))
    pred = LabeledPoints(pts, np.where(rng.random(200) < 0.8, gt.labels - 1, rng.integers(0, 3, 200)))
    perm = np.array([2, 0, 1])
    permuted = LabeledPoints(pts, perm[pred.labels])
    assert miou(pred, gt, majority_mapping(pred, gt)) == miou(permuted, gt, majority_mapping(permuted, gt))

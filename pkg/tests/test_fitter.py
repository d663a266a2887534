import numpy as np
import pytest

from conftest import single_part_model
from dpfield.fields import Primitive, PrimitiveKind
from dpfield.fitter import (
    DESK_LR,
    DESK_N_VOLUME,
    AdamState,
    FitConfig,
    adam_step,
    fit,
    init_model,
    kmeans,
    sample_surface_points,
    sample_volume_points,
)
from dpfield.geometry import VoxelGrid, rasterize_field, voxel_iou
from dpfield.synth import SynthPart, SynthSpec, voxelize


def _grid(fill):
    return VoxelGrid(np.full((16, 16, 16), float(fill)))


def test_volume_samples_empty_and_solid():
    _, occ = sample_volume_points(_grid(0), 500, 0)
    assert not occ.any()
    _, occ = sample_volume_points(_grid(1), 500, 0)
    assert occ.all()


def test_volume_samples_half_space_uniform():
    v = np.zeros((32, 32, 32))
    v[:16] = 1
    _, occ = sample_volume_points(VoxelGrid(v), 10_000, 0, boundary_fraction=0.0)
    assert abs(occ.mean() - 0.5) <= 0.05


def test_volume_samples_are_voxel_centers_with_truth():
    v = np.zeros((16, 16, 16))
    v[4:10, 3:8, 5:12] = 1
    g = VoxelGrid(v)
    pts, occ = sample_volume_points(g, 300, 1)
    idx = np.floor((pts + 1) / g.spacing).astype(int)
    np.testing.assert_array_equal(occ, v[idx[:, 0], idx[:, 1], idx[:, 2]])


def test_surface_samples_single_voxel():
    v = np.zeros((16, 16, 16))
    v[3, 7, 9] = 1
    pts = sample_surface_points(VoxelGrid(v), 200, 0)
    lo = -1 + np.array([3, 7, 9]) * (2 / 16)
    assert np.all(pts >= lo) and np.all(pts <= lo + 2 / 16)


def test_surface_samples_near_box_faces():
    # faces on voxel boundaries at 32^3
    g = voxelize(SynthSpec((SynthPart("box", (0, 0, 0), (0.5, 0.375, 0.25), 1),)), 32)
    pts = sample_surface_points(g, 2000, 4)
    gap = np.min(np.abs(np.abs(pts) - [0.5, 0.375, 0.25]), axis=1)
    assert np.all(gap <= g.spacing)
    np.testing.assert_array_equal(pts, sample_surface_points(g, 2000, 4))


def test_adam_first_step():
    out = adam_step(AdamState.zeros(3), np.zeros(3), np.ones(3), lr=0.1, eps=1e-12)
    np.testing.assert_allclose(out, -0.1, rtol=1e-9)


def test_adam_zero_gradient():
    p = np.array([0.3, -2.0])
    np.testing.assert_array_equal(adam_step(AdamState.zeros(2), p, np.zeros(2)), p)


def test_adam_rejects_nan():
    from dpfield.fitter import NonFiniteGradientError

    state = AdamState.zeros(2)
    with pytest.raises(NonFiniteGradientError):
        adam_step(state, np.zeros(2), np.array([np.nan, 0]))
    assert state.step == 0


def test_kmeans_separates_blobs():
    rng = np.random.default_rng(0)
    pts = np.concatenate([rng.normal(-0.6, 0.05, (100, 3)), rng.normal(0.6, 0.05, (100, 3))])
    centers, _ = kmeans(pts, 2, 0)
    assert np.sign(centers[0, 0]) != np.sign(centers[1, 0])


def test_init_model_centered_box():
    g = voxelize(SynthSpec((SynthPart("box", (0, 0, 0), (0.5, 0.5, 0.5), 1),)), 32)
    m = init_model(FitConfig(n_parts=1), g)
    assert np.all(np.abs(m.parts[0].primitive.translation) <= g.spacing)
    assert init_model(FitConfig(n_parts=1), g).parts[0] == m.parts[0]


def test_init_model_two_blobs():
    spec = SynthSpec((SynthPart("box", (-0.5, 0, 0), (0.2, 0.2, 0.2), 1), SynthPart("box", (0.5, 0, 0), (0.2, 0.2, 0.2), 2)))
    m = init_model(FitConfig(n_parts=2, primitive_kind="cylinder"), voxelize(spec, 32))
    xs = sorted(p.primitive.translation[0] for p in m.parts)
    assert xs[0] < 0 < xs[1]
    assert all(p.primitive.kind is PrimitiveKind.CYLINDER for p in m.parts)


def test_zero_epochs_returns_init():
    g = voxelize(SynthSpec((SynthPart("box", (0, 0, 0), (0.5, 0.5, 0.5), 1),)), 32)
    cfg = FitConfig(n_parts=2, epochs=(0, 0))
    res = fit(g, None, cfg)
    assert res.log == [] and res.model.parts == init_model(cfg, g).parts


def test_short_fit_decreases_loss_and_is_deterministic():
    g = voxelize(SynthSpec((SynthPart("box", (0, 0, 0), (0.5, 0.4, 0.3), 1),)), 32)
    cfg = FitConfig(n_parts=1, epochs=(300, 0), n_volume=(1024, 1024), n_surface=128, lr=1e-2, deformer_width=8)
    a, b = fit(g, None, cfg), fit(g, None, cfg)
    assert a.log == b.log and a.model.parts == b.model.parts
    first, last = np.mean([r[-1] for r in a.log[:20]]), np.mean([r[-1] for r in a.log[-20:]])
    assert last < first


def test_ppf_only_recovers_known_cuboid_field():
    known = single_part_model(Primitive("cuboid", translation=[0.1, -0.05, 0.0], scale=[3.0, 2.5, 2.0]))
    target = rasterize_field(known, 32, deform=False)
    cfg = FitConfig(n_parts=1, mode="ppf-only", epochs=(2000, 0), lr=DESK_LR, n_volume=DESK_N_VOLUME)
    fitted = fit(target, None, cfg).model
    assert voxel_iou(rasterize_field(fitted, 32, deform=False), target) >= 0.95


def test_stage_two_requires_target():
    g = _grid(1)
    with pytest.raises(ValueError):
        fit(g, None, FitConfig(n_parts=1, epochs=(1, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(n_parts=0)
    with pytest.raises(ValueError):
        FitConfig(mode="sometimes")
    with pytest.raises(ValueError):
        FitConfig(lr=0)

"""Acceptance criteria, each checked at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the run (see ``conftest.pytest_terminal_summary``). Fits use the
desk-scale settings of the CLI: lr 1e-2 and 8192 volume samples per stage.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_model, random_primitive, single_part_model
from dpfield.cli import main as cli_main
from dpfield.fields import (
    Primitive,
    eval_field_batch,
    object_field_value,
    part_field_value,
    quat_from_axis_angle,
    quat_multiply,
)
from dpfield.fitter import DESK_LR, DESK_N_VOLUME, FitConfig, fit
from dpfield.geometry import (
    LabeledPoints,
    VoxelGrid,
    chamfer_distance,
    marching_cubes,
    miou,
    rasterize_field,
    voxel_iou,
)
from dpfield.gradcheck import run_gradcheck
from dpfield.metrics import shape_metrics
from dpfield.synth import corpus_spec, voxelize


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def targets(name):
    spec = corpus_spec(name)
    return voxelize(spec, 32), voxelize(spec, 64)


def desk_config(**kw) -> FitConfig:
    return FitConfig(lr=DESK_LR, n_volume=DESK_N_VOLUME, **kw)


def timed_fit(name, **kw):
    g32, g64 = targets(name)
    cfg = desk_config(**kw)
    start = time.perf_counter()
    result = fit(g32, g64 if cfg.epochs[1] else None, cfg)
    seconds = time.perf_counter() - start
    deform = cfg.mode.value == "full"
    return result.model, shape_metrics(result.model, g64, deform=deform), seconds


@pytest.fixture(scope="module")
def table4_cylinders():
    return timed_fit("table4", n_parts=8, primitive_kind="cylinder")


@pytest.fixture(scope="module")
def table4_cuboids():
    return timed_fit("table4", n_parts=8, primitive_kind="cuboid")


def test_gradient_suite():
    report = run_gradcheck(trials=100, seed=0)
    ok = report.worst < 1e-4 and report.seconds < 60
    record("gradient suite", ok, f"worst rel err {report.worst:.2e} (< 1e-4), {report.seconds:.1f} s (< 60 s), {report.resamples} tie resamples")


def test_field_oracle_equivalence():
    rng = np.random.default_rng(2024)
    model = random_model(rng, 4)
    pts = rng.uniform(-1, 1, (10_000, 3))
    batch = eval_field_batch(model, pts)
    loop = np.array([eval_field_batch(model, p[None])[0] for p in pts])
    exact = bool(np.array_equal(batch, loop))

    worst_rigid, worst_max = 0.0, 0.0
    for _ in range(1000):
        prim = random_primitive(rng)
        q = rng.uniform(-1, 1, (8, 3))
        rot = quat_from_axis_angle(rng.normal(size=3), rng.uniform(0, np.pi))
        R = Primitive("cuboid", rot).matrix
        shift = rng.uniform(-0.5, 0.5, 3)
        moved = Primitive(prim.kind, quat_multiply(rot, prim.rotation), R @ prim.translation + shift, prim.scale, prim.confidence)
        a = part_field_value(prim, 0, 0, q)
        b = part_field_value(moved, 0, 0, q @ R.T + shift)
        worst_rigid = max(worst_rigid, float(np.max(np.abs(a - b))))
        other = random_primitive(rng)
        c = part_field_value(other, 0, 0, q)
        obj = np.array([object_field_value([x, y]) for x, y in zip(a, c)])
        # the object value dominates every part and equals one of them
        worst_max = max(worst_max, float(np.max(np.maximum(a, c) - obj)), float(np.max(np.minimum(np.abs(obj - a), np.abs(obj - c)))))
    ok = exact and worst_rigid <= 1e-9 and worst_max <= 1e-9
    record("field oracle equivalence", ok, f"batch==loop on 1e4 points: {exact}; rigid dev {worst_rigid:.1e}, max dev {worst_max:.1e} (<= 1e-9)")


def test_isosurface_geometry():
    model = single_part_model(Primitive("cuboid"))
    grid = rasterize_field(model, 64, deform=False)
    mesh = marching_cubes(grid, 0.6)
    half = (mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)) / 2
    target = -math.log(0.6) / 4
    err = float(np.max(np.abs(half - target)))
    record("isosurface geometry", err <= 1.5 * grid.spacing, f"half-extents {np.round(half, 5).tolist()} vs {target:.5f}, max err {err:.4f} (<= {1.5 * grid.spacing:.4f})")


def test_single_primitive_recovery():
    _, metrics, seconds = timed_fit("box1", n_parts=1, mode="ppf-only", epochs=(2000, 0))
    ok = metrics.iou32 >= 0.95 and seconds < 120
    record("single-primitive recovery", ok, f"box1 ppf-only M=1 IoU@32 {metrics.iou32:.4f} (>= 0.95), {seconds:.0f} s (< 120 s)")


def test_structured_fit(table4_cylinders):
    _, metrics, seconds = table4_cylinders
    ok = metrics.iou32 >= 0.85 and metrics.miou >= 0.80 and seconds < 900
    record("structured fit", ok, f"table4 M=8 cylinders IoU@32 {metrics.iou32:.4f} (>= 0.85), m-IoU {metrics.miou:.4f} (>= 0.80), {seconds:.0f} s (< 900 s)")


def test_ablation_direction():
    _, full, _ = timed_fit("taper1", n_parts=1, mode="full")
    _, ppf, _ = timed_fit("taper1", n_parts=1, mode="ppf-only")
    ok = full.cd_x1000 <= 0.9 * ppf.cd_x1000
    record("ablation direction", ok, f"taper1 CDx1000 full {full.cd_x1000:.3f} vs ppf-only {ppf.cd_x1000:.3f} (full <= 0.9 x ppf-only)")


def test_primitive_type_robustness(table4_cylinders, table4_cuboids):
    _, cyl, _ = table4_cylinders
    _, cub, _ = table4_cuboids
    rel = abs(cyl.cd_x1000 - cub.cd_x1000) / min(cyl.cd_x1000, cub.cd_x1000)
    ok = cyl.iou32 >= 0.80 and cub.iou32 >= 0.80 and rel < 0.5
    record("primitive-type robustness", ok, f"IoU@32 cylinder {cyl.iou32:.4f} / cuboid {cub.iou32:.4f} (>= 0.80), CDx1000 {cyl.cd_x1000:.3f} / {cub.cd_x1000:.3f}, rel diff {rel:.2f} (< 0.5)")


def test_determinism(tmp_path):
    g32, g64 = tmp_path / "g32.dpfvox", tmp_path / "g64.dpfvox"
    assert cli_main(["synth", "--shape", "table4", "--res", "32", "--out", str(g32)]) == 0
    assert cli_main(["synth", "--shape", "table4", "--res", "64", "--out", str(g64)]) == 0
    outputs = []
    for run in ("a", "b"):
        argv = ["fit", "--target32", str(g32), "--target64", str(g64), "--parts", "4", "--primitive", "cylinder",
                "--mode", "full", "--seed", "7", "--out", str(tmp_path / f"{run}.dpf"), "--log", str(tmp_path / f"{run}.csv"),
                "--epochs", "150", "50"]
        assert cli_main(argv) == 0
        outputs.append(((tmp_path / f"{run}.dpf").read_bytes(), (tmp_path / f"{run}.csv").read_bytes()))
    ok = outputs[0] == outputs[1]
    record("determinism", ok, f"model files identical: {outputs[0][0] == outputs[1][0]}, logs identical: {outputs[0][1] == outputs[1][1]}")


def test_metric_oracles():
    rng = np.random.default_rng(99)
    cd_exact = all(
        chamfer_distance(a, b, "tree") == chamfer_distance(a, b, "brute")
        for a, b in ((rng.normal(size=(500, 3)), rng.normal(size=(500, 3))) for _ in range(10))
    )
    a = np.zeros((8, 8, 8))
    a[0:4, 0:4, 0:4] = 1
    b = np.zeros((8, 8, 8))
    b[2:6, 0:4, 0:4] = 1
    iou = voxel_iou(VoxelGrid(a), VoxelGrid(b))
    pts = np.zeros((4, 3))
    m = miou(LabeledPoints(pts, [1, 1, 1, 1]), LabeledPoints(pts, [1, 1, 2, 2]))
    ok = cd_exact and iou == pytest.approx(1 / 3, abs=1e-15) and m == 0.25
    record("metric oracles", ok, f"tree CD == brute CD on 10 x 500-point sets: {cd_exact}; IoU {iou:.6f} (1/3); m-IoU {m} (0.25)")

"""Command-line entry point: ``dpfield <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 validation or runtime error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys

from . import io
from .fitter import DESK_LR, DESK_N_VOLUME, LOG_COLUMNS, FitConfig, FitDivergedError, fit
from .geometry import DEFAULT_ISO, marching_cubes, rasterize_field, segment_points
from .gradcheck import TIE_MARGIN, run_gradcheck
from .metrics import shape_metrics
from .synth import CORPUS_NAMES, corpus_spec, voxelize

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 2, 3
GRADCHECK_TOL = 1e-4


class CliError(Exception):
    """Validation failure reported with exit code 3."""


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def cmd_synth(args) -> None:
    grid = voxelize(corpus_spec(args.shape, args.corpus_seed), args.res)
    io.save_grid(grid, args.out)


def cmd_fit(args) -> None:
    g32 = io.load_grid(args.target32)
    if g32.resolution != 32:
        raise CliError(f"--target32 must be a 32^3 grid, got {g32.resolution}^3")
    g64 = None
    if args.target64:
        g64 = io.load_grid(args.target64)
        if g64.resolution != 64:
            raise CliError(f"--target64 must be a 64^3 grid, got {g64.resolution}^3")
    epochs = (args.epochs[0], args.epochs[1] if g64 is not None else 0)
    config = FitConfig(
        n_parts=args.parts,
        primitive_kind=args.primitive,
        mode=args.mode,
        epochs=epochs,
        n_volume=tuple(args.n_volume),
        n_surface=args.n_surface,
        lr=args.lr,
        seed=args.seed,
        checkpoint_every=args.checkpoint_every,
    )
    checkpoint = None
    if args.checkpoint_every:
        def checkpoint(model, it):
            io.save_model(model, f"{args.out}.iter{it:06d}")
    try:
        result = fit(g32, g64, config, checkpoint=checkpoint)
    except FitDivergedError as exc:
        if exc.model is not None:
            io.save_model(exc.model, args.out + ".diverged")
        if args.log:
            io.write_csv(args.log, LOG_COLUMNS, exc.log_rows)
        raise
    io.save_model(result.model, args.out)
    if args.log:
        io.write_csv(args.log, LOG_COLUMNS, result.log)


def cmd_extract(args) -> None:
    model = io.load_model(args.model)
    if not 0 < args.iso < 1:
        raise CliError("--iso must lie in (0, 1)")
    mesh = marching_cubes(rasterize_field(model, args.res), args.iso)
    labels = None
    if args.per_part and not mesh.is_empty:
        centroids = mesh.vertices[mesh.triangles].mean(axis=1)
        labels = segment_points(model, centroids).labels
    io.export_mesh_obj(mesh, args.out, labels)


def cmd_segment(args) -> None:
    model = io.load_model(args.model)
    grid = io.load_grid(args.grid)
    occ = grid.occupied().ravel(order="F")
    pts = grid.centers()[occ]
    parts = segment_points(model, pts).labels
    if grid.labels is not None:
        gt = grid.labels.ravel(order="F")[occ]
        rows = [(float(x), float(y), float(z), int(p), int(g)) for (x, y, z), p, g in zip(pts, parts, gt)]
        header = ("x", "y", "z", "part", "label")
    else:
        rows = [(float(x), float(y), float(z), int(p)) for (x, y, z), p in zip(pts, parts)]
        header = ("x", "y", "z", "part")
    io.write_csv(args.out, header, rows)


def cmd_metrics(args) -> None:
    model = io.load_model(args.model)
    gt = io.load_grid(args.gt)
    report = shape_metrics(model, gt, seed=args.seed)
    io.write_csv(args.report, ("metric", "value"), report.rows())
    for name, value in report.rows():
        print(f"{name}\t{value:.6g}" if not math.isnan(value) else f"{name}\tnan")


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.trials, args.seed, tie_margin=args.tie_margin)
    print(f"worst relative error {report.worst:.3e} over {args.trials} trials "
          f"({report.resamples} resampled near ties, {report.seconds:.1f} s)")
    return EXIT_OK if report.worst < GRADCHECK_TOL else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfield", description="Deformable primitive fields: fit, extract, evaluate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log fitting progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("synth", help="write a built-in target grid")
    p.add_argument("--shape", required=True, choices=CORPUS_NAMES)
    p.add_argument("--res", type=int, required=True, choices=(32, 64))
    p.add_argument("--out", required=True)
    p.add_argument("--corpus-seed", type=int, default=0, help="non-zero jitters part centers")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a model to target grids")
    p.add_argument("--target32", required=True)
    p.add_argument("--target64", help="64^3 grid for the second stage (skipped when absent)")
    p.add_argument("--parts", type=_positive_int, default=8)
    p.add_argument("--primitive", choices=("cuboid", "cylinder"), default="cuboid")
    p.add_argument("--mode", choices=("full", "ppf-only"), default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int, nargs=2, default=(2000, 2000), metavar=("E32", "E64"))
    p.add_argument("--lr", type=float, default=DESK_LR)
    p.add_argument("--n-volume", type=_positive_int, nargs=2, default=DESK_N_VOLUME, metavar=("N32", "N64"))
    p.add_argument("--n-surface", type=_positive_int, default=1024)
    p.add_argument("--checkpoint-every", type=int, default=0, help="write OUT.iterNNNNNN every K iterations")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", help="marching-cubes mesh of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--iso", type=float, default=DEFAULT_ISO)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--per-part", action="store_true", help="group faces by part")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("segment", help="label occupied voxels with part ids")
    p.add_argument("--model", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("metrics", help="CD x1000, IoU at 32^3 and m-IoU")
    p.add_argument("--model", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0, help="surface sampling seed")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tie-margin", type=float, default=TIE_MARGIN)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        code = args.func(args)
    except (CliError, ValueError, KeyError, OSError, FitDivergedError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dpfield {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Command-line entry for the multi-view consistency toolkit.

Usage:
    mvgc rig gen --preset nuscenes6 -o rig.json
    mvgc rig perturb --mode height --dz 0.65 -i rig.json -o target.json
    mvgc synth --rig rig.json --seed 7 --frames 2 -o out/
    mvgc consist eval --rig rig.json --bundle out/
    mvgc consist gradcheck --eps 1e-3 --samples 1000
    mvgc consist shift-study --mode height --values 0 0.2 0.65 -o study/
    mvgc adapter bench --c 64 --r 4 --k 3
    mvgc adapter demo --k-percent 0.05 --seed 1
    mvgc metrics nds --map .475 --mate .577 --mase .177 --maoe .147
    mvgc metrics closed-gap --model .421 --dt .213 --oracle .587

Exit codes: 0 success, 2 usage or input error, 3 a checked property failed.
"""

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from mvgc import config as settings
from mvgc.adapter import (
    AdapterSpec,
    check_structure_algebra,
    leda_demo,
    make_regression_domain,
    param_breakdown,
    structure_table,
)
from mvgc.camgeom import (
    PRESETS,
    SHIFT_PRESETS,
    CameraRig,
    ShiftSpec,
    load_rig,
    load_shift,
    make_preset_rig,
    perturb_rig,
    save_rig,
    shift_to_dict,
)
from mvgc.consist import VISIBILITY_MASKED, LossConfig, LossWeights, consistency_loss, perturbed_depths
from mvgc.errors import MvgcError
from mvgc.evalkit import (
    EvalConfig,
    benchmark_table,
    closed_gap,
    load_boxes,
    match_and_score,
    nds_star,
    render_metrics_table,
)
from mvgc.gradcheck import finite_difference_check
from mvgc.report_writer import RunManifest, TableWriter, manifest_path_for
from mvgc.synthrig import (
    FrameBundle,
    SceneSpec,
    bundle_poses,
    bundle_rasters,
    load_scene,
    read_bundles,
    render_scene,
    save_scene,
    shift_study,
    write_bundles,
)
from mvgc.warp import enumerate_pairs

logger = logging.getLogger(__name__)


EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PROPERTY = 3

LOSS_PROFILES = {"literal": LossConfig(), "masked": VISIBILITY_MASKED}


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )


def _arguments(args: argparse.Namespace) -> dict:
    skip = {"handler"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in skip}


def _write_manifest(manifest: RunManifest, output: Path) -> Path:
    path = manifest.finish().write(manifest_path_for(output))
    logger.info(f"✓ Manifest written to {path}")
    return path


# =============================================================================
# rig
# =============================================================================


def _shift_from_args(args: argparse.Namespace) -> ShiftSpec:
    if args.shift_file:
        return load_shift(args.shift_file)
    if args.preset_shift:
        if args.preset_shift not in SHIFT_PRESETS:
            raise MvgcError(f"unknown shift preset {args.preset_shift!r}; available: {', '.join(SHIFT_PRESETS)}")
        return SHIFT_PRESETS[args.preset_shift]
    return ShiftSpec(
        mode=args.mode,
        dx=args.dx,
        dy=args.dy,
        dz=args.dz,
        dpitch=math.radians(args.dpitch_deg),
        dyaw=math.radians(args.dyaw_deg),
    )


def cmd_rig(args: argparse.Namespace) -> int:
    manifest = RunManifest(command=f"rig {args.action}", arguments=_arguments(args))
    if args.action == "gen":
        rig = make_preset_rig(args.preset, width=args.width, height=args.height)
        logger.info(f"✓ Built preset {args.preset} with {len(rig)} views")
    else:
        source = load_rig(args.input)
        manifest.add_input(args.input)
        shift = _shift_from_args(args)
        rig = perturb_rig(source, shift)
        manifest.arguments["shift"] = shift_to_dict(shift)
        logger.info(f"✓ Applied {shift.label()} to {len(rig)} views")

    output = save_rig(rig, args.output)
    manifest.add_output(output)
    _write_manifest(manifest, output)
    print(output)
    return EXIT_OK


# =============================================================================
# synth
# =============================================================================


def _scene_from_args(args: argparse.Namespace) -> SceneSpec:
    spec = load_scene(args.scene) if getattr(args, "scene", None) else SceneSpec()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.frames is not None:
        overrides["frames"] = args.frames
    return replace(spec, **overrides) if overrides else spec


def _rig_from_args(args: argparse.Namespace, manifest: Optional[RunManifest] = None) -> CameraRig:
    if args.rig:
        if manifest is not None:
            manifest.add_input(args.rig)
        return load_rig(args.rig)
    return make_preset_rig(args.preset)


def cmd_synth(args: argparse.Namespace) -> int:
    manifest = RunManifest(command="synth", arguments=_arguments(args))
    rig = _rig_from_args(args, manifest)
    if args.scene:
        manifest.add_input(args.scene)
    spec = _scene_from_args(args)
    manifest.seed = spec.seed

    bundles = render_scene(rig, spec, max_workers=args.threads)
    out_dir = Path(args.output)
    written = write_bundles(bundles, out_dir)
    written.append(save_scene(spec, out_dir / "scene.json"))
    written.append(save_rig(rig, out_dir / "rig.json"))

    writer = TableWriter(out_dir)
    for path in written:
        writer.record(path)
    manifest.extend_outputs(writer.file_info)
    _write_manifest(manifest, out_dir)
    print(out_dir)
    return EXIT_OK


# =============================================================================
# consist
# =============================================================================


def _scene_inputs(args: argparse.Namespace, manifest: RunManifest) -> Tuple[CameraRig, List[FrameBundle]]:
    """Rig plus bundles, read from ``--bundle`` or rendered from the scene flags."""
    if args.bundle:
        bundle_dir = Path(args.bundle)
        rig_path = Path(args.rig) if args.rig else bundle_dir / "rig.json"
        manifest.add_input(rig_path)
        rig = load_rig(rig_path)
        bundles = read_bundles(bundle_dir, rig.ids)
        manifest.add_input(bundle_dir / "trajectory.json")
        return rig, bundles
    rig = _rig_from_args(args, manifest)
    spec = _scene_from_args(args)
    manifest.seed = spec.seed
    return rig, render_scene(rig, spec, max_workers=args.threads)


def _consist_eval(args: argparse.Namespace, manifest: RunManifest) -> int:
    rig, bundles = _scene_inputs(args, manifest)
    depths, images = bundle_rasters(bundles)
    dst_depths = dst_images = None
    if args.target_bundle:
        dst_depths, dst_images = bundle_rasters(read_bundles(args.target_bundle, rig.ids))
        manifest.add_input(Path(args.target_bundle) / "trajectory.json")

    pairs = enumerate_pairs(rig, len(bundles), args.temporal_window)
    report = consistency_loss(
        rig,
        pairs,
        depths,
        images,
        weights=LossWeights(*args.weights),
        l_det=args.l_det,
        config=LOSS_PROFILES[args.profile],
        ego_poses=bundle_poses(bundles),
        dst_depths=dst_depths,
        dst_images=dst_images,
        max_workers=args.threads,
    )
    text = report.to_json()
    if args.output:
        output = Path(args.output)
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(text)
        manifest.add_output(output)
        _write_manifest(manifest, output)
    print(text)
    return EXIT_OK


def _consist_gradcheck(args: argparse.Namespace, manifest: RunManifest) -> int:
    rig, bundles = _scene_inputs(args, manifest)
    depths, images = bundle_rasters(bundles)
    seed = args.seed if args.seed is not None else settings.DEFAULT_SEED
    if args.perturb > 0:
        depths = perturbed_depths(depths, amplitude=args.perturb, seed=seed)

    pairs = enumerate_pairs(rig, len(bundles), args.temporal_window)
    report = finite_difference_check(
        rig,
        pairs,
        depths,
        images,
        weights=LossWeights(*args.weights),
        eps=args.eps,
        samples=args.samples,
        seed=seed,
        config=LOSS_PROFILES["literal"],
        ego_poses=bundle_poses(bundles),
        tolerance=args.tolerance,
        max_workers=args.threads,
    )
    if args.output:
        writer = TableWriter(args.output)
        writer.write("gradcheck", report.to_table(), fmt="csv")
        manifest.extend_outputs(writer.file_info)
        _write_manifest(manifest, writer.output_dir)
    print(json.dumps(report.to_dict(), indent=2))

    if not report.passed:
        logger.error(f"✗ Gradient check failed: max rel err {report.max_rel_err:.3e} >= {report.tolerance:g}")
        return EXIT_PROPERTY
    return EXIT_OK


def _study_shifts(args: argparse.Namespace) -> List[ShiftSpec]:
    if args.presets:
        missing = [name for name in args.presets if name not in SHIFT_PRESETS]
        if missing:
            raise MvgcError(f"unknown shift presets {missing}; available: {', '.join(SHIFT_PRESETS)}")
        shifts = [SHIFT_PRESETS[name] for name in args.presets]
        return shifts if any(s.is_zero for s in shifts) else [SHIFT_PRESETS["zero"]] + shifts
    if args.mode == "height":
        return [ShiftSpec.height(v) for v in args.values]
    return [ShiftSpec.pitch(v) for v in args.values]


def _consist_shift_study(args: argparse.Namespace, manifest: RunManifest) -> int:
    rig = _rig_from_args(args, manifest)
    spec = _scene_from_args(args)
    manifest.seed = spec.seed
    result = shift_study(
        rig,
        spec,
        _study_shifts(args),
        weights=LossWeights(*args.weights),
        config=LOSS_PROFILES[args.profile],
        max_workers=args.threads,
    )

    writer = TableWriter(args.output)
    result.write(writer)
    manifest.extend_outputs(writer.file_info)
    _write_manifest(manifest, writer.output_dir)

    print(render_metrics_table([row.__dict__ for row in result.rows]))
    print(f"monotone: {'true' if result.monotone else 'false'}")
    return EXIT_OK


def cmd_consist(args: argparse.Namespace) -> int:
    manifest = RunManifest(command=f"consist {args.action}", arguments=_arguments(args), seed=args.seed)
    handlers = {
        "eval": _consist_eval,
        "gradcheck": _consist_gradcheck,
        "shift-study": _consist_shift_study,
    }
    return handlers[args.action](args, manifest)


# =============================================================================
# adapter
# =============================================================================


def cmd_adapter(args: argparse.Namespace) -> int:
    manifest = RunManifest(command=f"adapter {args.action}", arguments=_arguments(args), seed=args.seed)

    if args.action == "bench":
        rows = structure_table(args.c, args.r, args.k, args.height, args.width)
        ours = AdapterSpec(args.c, args.height, args.width, kernel=args.k, ratio=args.r)
        print(render_metrics_table(rows))
        print("")
        print(render_metrics_table(param_breakdown(ours)))
        if args.output:
            writer = TableWriter(args.output)
            writer.write_rows("adapter_bench", rows)
            manifest.extend_outputs(writer.file_info)
            _write_manifest(manifest, writer.output_dir)

        violated = check_structure_algebra(args.c, args.r, args.k, args.height, args.width)
        for relation in violated:
            logger.error(f"✗ {relation}")
        if violated:
            return EXIT_PROPERTY
        logger.info("✓ Structure ordering and symmetry hold")
        return EXIT_OK

    seed = args.seed if args.seed is not None else settings.DEFAULT_SEED
    source = make_regression_domain(seed)
    target = make_regression_domain(seed, scale=args.scale, offset=args.offset)
    report = leda_demo(source, target, args.k_percent, steps=args.steps, lr=args.lr, seed=seed)
    print(json.dumps(report.to_dict(), indent=2))

    if report.source_retention_err != 0.0:
        logger.error(f"✗ Source outputs moved by {report.source_retention_err:g} with the adapter bypassed")
        return EXIT_PROPERTY
    return EXIT_OK


# =============================================================================
# metrics
# =============================================================================


def cmd_metrics(args: argparse.Namespace) -> int:
    manifest = RunManifest(command=f"metrics {args.action}", arguments=_arguments(args))

    if args.action == "nds":
        print(f"{nds_star(args.map, args.mate, args.mase, args.maoe):.3f}")
    elif args.action == "closed-gap":
        print(f"{closed_gap(args.model, args.dt, args.oracle):+.1f}%")
    elif args.action == "match":
        preds, gts = load_boxes(args.pred), load_boxes(args.gt)
        manifest.add_input(args.pred)
        manifest.add_input(args.gt)
        cfg = EvalConfig(range_m=args.range_m, thresholds=tuple(args.thresholds))
        print(json.dumps(match_and_score(preds, gts, cfg).to_dict(), indent=2))
    else:
        rows = benchmark_table()
        columns = ["task", "method", "nds_reported", "nds_computed", "closed_gap_reported", "closed_gap_computed"]
        print(render_metrics_table(rows, columns))
        if args.output:
            writer = TableWriter(args.output)
            writer.write_rows("benchmark", rows)
            manifest.extend_outputs(writer.file_info)
            _write_manifest(manifest, writer.output_dir)
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================


def _add_scene_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rig", help="Rig JSON (default: --preset)")
    parser.add_argument("--preset", default="nuscenes6", help=f"Rig preset ({', '.join(PRESETS)})")
    parser.add_argument("--scene", help="Scene JSON to start from")
    parser.add_argument("--seed", type=int, default=None, help=f"Scene seed (default {settings.DEFAULT_SEED})")
    parser.add_argument("--frames", type=int, default=None, help=f"Frames (default {settings.DEFAULT_FRAMES})")


def _add_loss_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--weights",
        type=float,
        nargs=3,
        default=list(settings.DEFAULT_LOSS_WEIGHTS),
        metavar=("DET", "OV", "P"),
        help="Loss weights lambda_det lambda_ov lambda_p",
    )
    parser.add_argument(
        "--temporal-window", type=int, default=settings.DEFAULT_TEMPORAL_WINDOW, help="Temporal pair window"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvgc",
        description="Multi-view geometric consistency toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mvgc rig gen --preset nuscenes6 -o rig.json
  mvgc synth --rig rig.json --seed 7 --frames 2 -o out/
  mvgc consist gradcheck --eps 1e-3 --samples 1000
  mvgc metrics closed-gap --model .421 --dt .213 --oracle .587
        """,
    )
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument(
        "--threads", type=int, default=None, help=f"Worker cap (default ${settings.THREADS_ENV} or min(8, cpus))"
    )
    groups = parser.add_subparsers(dest="group", required=True)

    # rig
    rig = groups.add_parser("rig", help="Build or perturb rig descriptions")
    rig.set_defaults(handler=cmd_rig)
    rig_actions = rig.add_subparsers(dest="action", required=True)
    gen = rig_actions.add_parser("gen", help="Write a preset rig")
    gen.add_argument("--preset", default="nuscenes6", help=f"One of {', '.join(PRESETS)}")
    gen.add_argument("--width", type=int, default=settings.RASTER_WIDTH)
    gen.add_argument("--height", type=int, default=settings.RASTER_HEIGHT)
    gen.add_argument("-o", "--output", required=True)
    perturb = rig_actions.add_parser("perturb", help="Apply an installation shift")
    perturb.add_argument("-i", "--input", required=True)
    perturb.add_argument("-o", "--output", required=True)
    perturb.add_argument("--mode", default="custom", choices=["height", "pitch", "all", "custom"])
    perturb.add_argument("--dx", type=float, default=0.0)
    perturb.add_argument("--dy", type=float, default=0.0)
    perturb.add_argument("--dz", type=float, default=0.0)
    perturb.add_argument("--dpitch-deg", type=float, default=0.0)
    perturb.add_argument("--dyaw-deg", type=float, default=0.0)
    perturb.add_argument("--preset-shift", help=f"One of {', '.join(SHIFT_PRESETS)}")
    perturb.add_argument("--shift-file", help="Shift JSON")

    # synth
    synth = groups.add_parser("synth", help="Render a synthetic scene bundle")
    synth.set_defaults(handler=cmd_synth)
    _add_scene_flags(synth)
    synth.add_argument("-o", "--output", required=True)

    # consist
    consist = groups.add_parser("consist", help="Consistency losses and studies")
    consist.set_defaults(handler=cmd_consist)
    consist_actions = consist.add_subparsers(dest="action", required=True)

    ev = consist_actions.add_parser("eval", help="Print the LossReport of a bundle")
    _add_scene_flags(ev)
    _add_loss_flags(ev)
    ev.add_argument("--bundle", help="Bundle directory written by synth")
    ev.add_argument("--target-bundle", help="Bundle of the shifted target rig")
    ev.add_argument("--profile", choices=sorted(LOSS_PROFILES), default="masked")
    ev.add_argument("--l-det", type=float, default=0.0)
    ev.add_argument("-o", "--output", help="Report JSON path")

    gc = consist_actions.add_parser("gradcheck", help="Finite-difference gradient check")
    _add_scene_flags(gc)
    _add_loss_flags(gc)
    gc.add_argument("--bundle", help="Bundle directory written by synth")
    gc.add_argument("--eps", type=float, default=settings.GRADCHECK_EPS)
    gc.add_argument("--samples", type=int, default=settings.GRADCHECK_SAMPLES)
    gc.add_argument("--tolerance", type=float, default=settings.GRADCHECK_TOLERANCE)
    gc.add_argument("--perturb", type=float, default=0.05, help="Smooth depth perturbation amplitude (0 = off)")
    gc.add_argument("-o", "--output", help="Directory for gradcheck.csv")

    study = consist_actions.add_parser("shift-study", help="Loss growth under installation shifts")
    _add_scene_flags(study)
    study.add_argument(
        "--weights", type=float, nargs=3, default=list(settings.DEFAULT_LOSS_WEIGHTS), metavar=("DET", "OV", "P")
    )
    study.add_argument("--mode", choices=["height", "pitch"], default="height")
    study.add_argument("--values", type=float, nargs="+", default=[0.0, 0.2, 0.65], help="dz (m) or pitch (deg)")
    study.add_argument("--presets", nargs="+", help=f"Shift presets instead of --mode ({', '.join(SHIFT_PRESETS)})")
    study.add_argument("--profile", choices=sorted(LOSS_PROFILES), default="masked")
    study.add_argument("-o", "--output", required=True, help="Output directory")

    # adapter
    adapter = groups.add_parser("adapter", help="Adapter structure and adaptation demo")
    adapter.set_defaults(handler=cmd_adapter, seed=None)
    adapter_actions = adapter.add_subparsers(dest="action", required=True)
    bench = adapter_actions.add_parser("bench", help="Parameter counts per structure variant")
    bench.add_argument("--c", type=int, default=64)
    bench.add_argument("--r", type=int, default=settings.DEFAULT_ADAPTER_RATIO)
    bench.add_argument("--k", type=int, default=3)
    bench.add_argument("--height", type=int, default=settings.ADAPTER_BENCH_RASTER[0], help="Raster height")
    bench.add_argument("--width", type=int, default=settings.ADAPTER_BENCH_RASTER[1], help="Raster width")
    bench.add_argument("-o", "--output", help="Directory for adapter_bench.csv")
    demo = adapter_actions.add_parser("demo", help="Adapter-only adaptation on k%% of a shifted domain")
    demo.add_argument("--k-percent", type=float, default=0.05, help="Fraction of target labels in (0, 1]")
    demo.add_argument("--seed", type=int, default=None)
    demo.add_argument("--steps", type=int, default=300)
    demo.add_argument("--lr", type=float, default=1e-2)
    demo.add_argument("--scale", type=float, default=1.5, help="Target input scale")
    demo.add_argument("--offset", type=float, default=1.0, help="Target input offset")

    # metrics
    metrics = groups.add_parser("metrics", help="NDS*, closed gap and box matching")
    metrics.set_defaults(handler=cmd_metrics)
    metric_actions = metrics.add_subparsers(dest="action", required=True)
    nds = metric_actions.add_parser("nds", help="NDS* from mAP and TP errors")
    nds.add_argument("--map", type=float, required=True)
    nds.add_argument("--mate", type=float, required=True)
    nds.add_argument("--mase", type=float, required=True)
    nds.add_argument("--maoe", type=float, required=True)
    gap = metric_actions.add_parser("closed-gap", help="Share of the transfer gap closed")
    gap.add_argument("--model", type=float, required=True)
    gap.add_argument("--dt", type=float, required=True)
    gap.add_argument("--oracle", type=float, required=True)
    match = metric_actions.add_parser("match", help="Score predicted boxes against ground truth")
    match.add_argument("--pred", required=True)
    match.add_argument("--gt", required=True)
    match.add_argument("--range-m", type=float, default=settings.EVAL_RANGE_M)
    match.add_argument("--thresholds", type=float, nargs="+", default=list(settings.EVAL_THRESHOLDS_M))
    table = metric_actions.add_parser("table", help="Recompute the cross-dataset benchmark rows")
    table.add_argument("-o", "--output", help="Directory for benchmark.csv")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.verbose)

    try:
        return args.handler(args)
    except (MvgcError, OSError, json.JSONDecodeError) as e:
        logger.error(f"✗ {e}")
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

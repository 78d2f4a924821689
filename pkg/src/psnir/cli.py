"""Command-line entry point: ``psnir <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataset_io as dio
from .baseline_ls import LsOptions, solve_least_squares
from .domain import LightingSet, SceneError
from .evaluator import evaluate
from .synth import Material, make_heightfield_scene, make_sphere_scene, random_lights
from .trainer import TrainConfig, TrainingDiverged, run_median_protocol, thread_limit

log = logging.getLogger("psnir")


def _load(args):
    opts = dio.LoadOptions(downsample=args.downsample, grayscale=args.grayscale,
                           divide_intensities=args.divide_intensities)
    return dio.load_scene(args.scene_dir, opts)


def _write_eval(out, scene, normals, **meta):
    if scene.truth is None:
        return None
    report = evaluate(normals, scene.truth, scene.mask, **meta)
    (out / "eval.txt").write_text(report.to_text())
    return report


def cmd_solve_ls(args):
    scene = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    opts = LsOptions(args.threshold)
    res = solve_least_squares(scene.stack, scene.lights, scene.mask, opts)
    dio.save_normal_map(res.normals, scene.mask, out / "normal.psnt")
    dio.save_tensor(res.albedo[None], out / "albedo.psnt")
    report = _write_eval(out, scene, res.normals, method="least_squares")
    if report is not None:
        print(f"mean_angular_error {report.mean:.6f}")
    return 0


def cmd_solve_nir(args):
    scene = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    supervision = "none" if args.no_prior else "all" if args.prior_all else "early"
    cfg = TrainConfig(
        total_iters=args.iters,
        supervision_iters=min(50, args.iters),
        lr_drop_at=min(900, args.iters) if args.lr_drop_at is None else args.lr_drop_at,
        seed=args.seed,
        repeat_runs=args.runs,
        supervision=supervision,
        ps_channels=args.ps_channels,
        use_specularity=not args.no_specularity,
        use_global_blend=not args.no_global_blend,
    )
    summary = run_median_protocol(scene, cfg, keep_results=True)
    (out / "summary.txt").write_text(summary.to_text())
    ok = [r for r in summary.runs if not r.diverged]
    if not ok:
        raise TrainingDiverged(cfg.total_iters, None)
    target = summary.median
    best = min(ok, key=lambda r: abs(r.score - target))
    res = best.result
    dio.save_normal_map(res.normals, scene.mask, out / "normal.psnt")
    (out / "trace.txt").write_text(res.trace.to_text())
    if not args.no_images:
        dio.save_reconstructions(res.reconstruction, res.reflectance,
                                 res.reconstruction - res.observed, out / "reconstructions",
                                 scene.mask)
    report = _write_eval(out, scene, res.normals, method="nir", seed=best.seed,
                         iterations=cfg.total_iters, runtime=f"{res.runtime:.1f}s")
    print(f"median_score {summary.median!r}")
    if report is not None:
        print(f"mean_angular_error {report.mean:.6f}")
    if summary.diverged:
        print(f"diverged_seeds {' '.join(map(str, summary.diverged))}")
    return 0


def cmd_render_synth(args):
    lights = random_lights(args.lights, args.seed, args.cone)
    if args.color:
        lights = LightingSet(lights.directions, np.ones((lights.M, 3)))
    channels = 3 if args.color else 1
    material = Material(args.albedo, args.specular, args.shininess)
    if args.shape == "sphere":
        scene = make_sphere_scene(args.radius, args.resolution, lights, material, args.seed,
                                  args.noise, channels)
    else:
        scene = make_heightfield_scene(args.expr, args.resolution, lights, material, args.seed,
                                       args.noise, channels, shadows=not args.no_shadows)
    factor = dio.save_scene(scene, args.out)
    print(f"wrote {scene.stack.M} observations to {args.out} (scale {factor:.6g})")
    return 0


def cmd_eval(args):
    est = dio.load_normal_map(args.estimate)
    truth = dio.load_normal_map(args.truth)
    mask = dio.load_mask(args.mask)
    report = evaluate(est, truth, mask)
    sys.stdout.write(report.to_text())
    return 0


def _scene_args(p):
    p.add_argument("scene_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--downsample", type=int, default=1)
    p.add_argument("--grayscale", action="store_true")
    p.add_argument("--divide-intensities", action="store_true",
                   help="divide images by light intensity instead of folding it into the lights")


def build_parser():
    parser = argparse.ArgumentParser(prog="psnir", description="Calibrated photometric stereo")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-ls", help="Lambertian least squares")
    _scene_args(p)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_solve_ls)

    p = sub.add_parser("solve-nir", help="unsupervised neural inverse rendering")
    _scene_args(p)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--lr-drop-at", type=int, default=None)
    p.add_argument("--ps-channels", type=int, default=384)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--no-prior", action="store_true")
    group.add_argument("--prior-all", action="store_true")
    p.add_argument("--no-specularity", action="store_true")
    p.add_argument("--no-global-blend", action="store_true")
    p.add_argument("--no-images", action="store_true")
    p.set_defaults(func=cmd_solve_nir)

    p = sub.add_parser("render-synth", help="write a synthetic scene directory")
    p.add_argument("--shape", choices=("sphere", "heightfield"), default="sphere")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--lights", type=int, default=16)
    p.add_argument("--cone", type=float, default=45.0, help="max light polar angle (deg)")
    p.add_argument("--radius", type=float, default=0.9)
    p.add_argument("--albedo", type=float, default=0.6)
    p.add_argument("--specular", type=float, default=0.0)
    p.add_argument("--shininess", type=float, default=30.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--color", action="store_true")
    p.add_argument("--expr", default="6*exp(-((x-W/2)**2+(y+H/2)**2)/(W*W/16))")
    p.add_argument("--no-shadows", action="store_true")
    p.set_defaults(func=cmd_render_synth)

    p = sub.add_parser("eval", help="mean angular error between two normal maps")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except (SceneError, TrainingDiverged, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
standard error; results go to files or standard output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import pipeline
from .interpolation import resample, slab_samples_for
from .metric import MetricConfig, NMIMetric
from .pca_init import background_floor, volume_axes
from .phantom import make_pair, random_spec, write_truth
from .preprocess import SigmoidParams, auto_sigmoid_params, sigmoid_transform
from .transform import AffineTransform, BSplineFFD, ComposedTransform, read_transform, write_transform
from .volume import BoundingBox, load_metaimage, save_metaimage

log = logging.getLogger("petreg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _box(text):
    try:
        return BoundingBox.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_sigmoid_flags(p, default_auto=True):
    g = p.add_argument_group("sigmoid intensity remap")
    g.add_argument("--sigmoid-auto", dest="sigmoid_auto", action="store_true", default=default_auto,
                   help="derive alpha/beta from PET percentiles")
    g.add_argument("--no-sigmoid", dest="sigmoid_auto", action="store_false",
                   help="skip the sigmoid remap")
    g.add_argument("--sigmoid-alpha", type=float, default=None, help="explicit alpha")
    g.add_argument("--sigmoid-beta", type=float, default=None, help="explicit beta")
    g.add_argument("--sigmoid-low-pct", type=float, default=0.02,
                   help="lower percentile of the auto band")
    g.add_argument("--sigmoid-high-pct", type=float, default=0.50,
                   help="upper percentile of the auto band")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads for metric and resampling; None uses all cores")
    common.add_argument("--trace", default=None, help="CSV file for optimizer iteration traces")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")

    ap = _Parser(prog="petreg", description="PET to MRI 3D registration. Global flags "
                 "(--seed, --threads, --trace, --verbose) follow the subcommand.")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    kw = dict(parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = sub.add_parser("register", help="full two-stage registration", **kw)
    p.add_argument("--fixed", required=True, help="MRI volume (.mhd)")
    p.add_argument("--moving", required=True, help="PET volume (.mhd)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--voi-fixed", type=_box, default=None, help="i0,j0,k0,i1,j1,k1 voxel box in the MRI")
    p.add_argument("--voi-moving", type=_box, default=None, help="i0,j0,k0,i1,j1,k1 voxel box in the PET")
    _add_sigmoid_flags(p)
    p.add_argument("--global-only", action="store_true", help="skip the B-spline stage")
    p.add_argument("--grid-spacing", type=float, nargs="+", default=None,
                   help="finest control spacing in mm, one or three values; None means extent/8")
    p.add_argument("--bins", type=int, default=50, help="histogram bins")
    p.add_argument("--sample-fraction", type=float, default=0.2, help="metric sample fraction at full resolution")
    p.add_argument("--fuse-mode", choices=("checkerboard", "alpha"), default="checkerboard", help="fused overlay")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("sigmoid", help="apply the sigmoid intensity remap", **kw)
    p.add_argument("--input", required=True, help="input volume")
    p.add_argument("--output", required=True, help="output volume")
    _add_sigmoid_flags(p)
    p.add_argument("--out-min", type=float, default=None, help="output minimum; None means 0")
    p.add_argument("--out-max", type=float, default=None, help="output maximum; None means the input maximum")
    p.set_defaults(func=cmd_sigmoid)

    p = sub.add_parser("pca", help="principal axes of a volume", **kw)
    p.add_argument("--input", required=True, help="input volume")
    p.add_argument("--threshold", type=float, default=None, help="binarise at this intensity; None uses intensity weights")
    p.add_argument("--no-background", action="store_true", help="do not subtract the border background level")
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("metric", help="NMI between two volumes", **kw)
    p.add_argument("--fixed", required=True, help="fixed volume")
    p.add_argument("--moving", required=True, help="moving volume")
    p.add_argument("--affine", default=None, help="affine transform file; None means identity")
    p.add_argument("--bspline", default=None, help="B-spline transform file applied before the affine")
    p.add_argument("--bins", type=int, default=50, help="histogram bins")
    p.add_argument("--sample-fraction", type=float, default=1.0, help="fraction of fixed voxels sampled")
    p.set_defaults(func=cmd_metric)

    p = sub.add_parser("resample", help="resample a volume onto a reference grid", **kw)
    p.add_argument("--fixed", required=True, help="reference geometry")
    p.add_argument("--moving", required=True, help="volume to resample")
    p.add_argument("--affine", default=None, help="affine transform file; None means identity")
    p.add_argument("--bspline", default=None, help="B-spline transform file applied before the affine")
    p.add_argument("--order", type=int, choices=(1, 3), default=3, help="interpolation order")
    p.add_argument("--output", required=True, help="output volume")
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("fuse", help="fused overlay of two volumes on one grid", **kw)
    p.add_argument("--fixed", required=True, help="MRI volume")
    p.add_argument("--moving", required=True, help="registered PET on the MRI grid")
    p.add_argument("--mode", choices=("checkerboard", "alpha"), default="checkerboard", help="fusion mode")
    p.add_argument("--output", required=True, help="output volume")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("phantom", help="write a synthetic MRI/PET pair with ground truth", **kw)
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--max-translation", type=float, default=10.0, help="mm")
    p.add_argument("--max-rotation", type=float, default=15.0, help="degrees, in-plane")
    p.add_argument("--warp-max", type=float, default=0.0, help="max warp displacement, mm")
    p.add_argument("--hotspot-ratio", type=float, default=8.0, help="hot spot uptake relative to the body")
    p.add_argument("--n-hotspots", type=int, default=3, help="number of hot spots")
    p.set_defaults(func=cmd_phantom)
    return ap


# --------------------------------------------------------------------------

def _load(path, flag):
    if not os.path.isfile(path):
        raise UsageError(f"{flag}: no such file: {path}")
    return load_metaimage(path)


def _sigmoid_setting(args):
    if (args.sigmoid_alpha is None) != (args.sigmoid_beta is None):
        raise UsageError("--sigmoid-alpha and --sigmoid-beta must be given together")
    if args.sigmoid_alpha is not None:
        return "explicit"
    return "auto" if args.sigmoid_auto else None


def _transform(args):
    affine = read_transform(args.affine) if args.affine else None
    if affine is not None and not isinstance(affine, AffineTransform):
        raise UsageError(f"--affine: {args.affine} does not hold an affine transform")
    ffd = read_transform(args.bspline) if args.bspline else None
    if ffd is not None and not isinstance(ffd, BSplineFFD):
        raise UsageError(f"--bspline: {args.bspline} does not hold a B-spline transform")
    if ffd is None:
        return affine or AffineTransform.identity()
    return ComposedTransform(affine or AffineTransform.identity(), ffd)


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def cmd_register(args):
    mri = _load(args.fixed, "--fixed")
    pet = _load(args.moving, "--moving")
    mode = _sigmoid_setting(args)
    if mode == "explicit":
        sig = SigmoidParams(args.sigmoid_alpha, args.sigmoid_beta, 0.0, float(pet.data.max()))
    else:
        sig = mode
    grid = None
    if args.grid_spacing is not None:
        if len(args.grid_spacing) not in (1, 3) or min(args.grid_spacing) <= 0:
            raise UsageError("--grid-spacing takes one or three positive values")
        grid = tuple(args.grid_spacing) if len(args.grid_spacing) == 3 else args.grid_spacing[0]
    cfg = pipeline.RegistrationConfig(
        bins=args.bins, sample_fraction_full=args.sample_fraction, seed=args.seed, sigmoid=sig,
        sigmoid_low_pct=args.sigmoid_low_pct, sigmoid_high_pct=args.sigmoid_high_pct,
        global_only=args.global_only, grid_spacing=grid, fuse_mode=args.fuse_mode,
    )
    res = pipeline.register_full(mri, pet, args.voi_fixed, args.voi_moving, cfg)
    out = _out_dir(args.out_dir)
    save_metaimage(res.registered_pet, os.path.join(out, "registered_pet.mhd"))
    save_metaimage(res.fused, os.path.join(out, "fused.mhd"))
    write_transform(os.path.join(out, "affine.txt"), res.affine)
    write_transform(os.path.join(out, "bspline.txt"), res.ffd)
    with open(os.path.join(out, "report.jsonl"), "w", newline="\n") as fh:
        for r in res.reports:
            fh.write(json.dumps(r.as_dict()) + "\n")
        fh.write(json.dumps({"stage": "total", "timings": {k: round(v, 4) for k, v in res.timings.items()}}) + "\n")
    if args.trace:
        with open(args.trace, "w", newline="\n") as fh:
            fh.write("stage,level,iteration,cost,step\n")
            for r in res.reports:
                r.report.write_trace(fh, f"{r.stage},{r.level}")
    print(out)


def cmd_sigmoid(args):
    vol = _load(args.input, "--input")
    mode = _sigmoid_setting(args)
    out_min = 0.0 if args.out_min is None else args.out_min
    out_max = float(vol.data.max()) if args.out_max is None else args.out_max
    if mode == "explicit":
        params = SigmoidParams(args.sigmoid_alpha, args.sigmoid_beta, out_min, out_max)
    elif mode == "auto":
        auto = auto_sigmoid_params(vol, args.sigmoid_low_pct, args.sigmoid_high_pct)
        params = SigmoidParams(auto.alpha, auto.beta, out_min, out_max)
    else:
        raise UsageError("sigmoid needs --sigmoid-auto or --sigmoid-alpha/--sigmoid-beta")
    save_metaimage(sigmoid_transform(vol, params), args.output)
    print(json.dumps({"alpha": params.alpha, "beta": params.beta,
                      "out_min": params.out_min, "out_max": params.out_max}))


def cmd_pca(args):
    vol = _load(args.input, "--input")
    if args.threshold is not None:
        axes = volume_axes(vol, args.threshold)
    else:
        axes = volume_axes(vol, floor=0.0 if args.no_background else background_floor(vol))
    print(axes.format())


def cmd_metric(args):
    fixed = _load(args.fixed, "--fixed")
    moving = _load(args.moving, "--moving")
    metric = NMIMetric(fixed, moving, MetricConfig(args.bins, args.sample_fraction, args.seed))
    hx, hy, hxy = metric.histogram(_transform(args)).entropies()
    for name, v in (("H(X)", hx), ("H(Y)", hy), ("H(X,Y)", hxy), ("MI", hx + hy - hxy), ("NMI", (hx + hy) / hxy)):
        print(f"{name} {v:.9g}")


def cmd_resample(args):
    fixed = _load(args.fixed, "--fixed")
    moving = _load(args.moving, "--moving")
    out = resample(moving, _transform(args), fixed, order=args.order,
                   slab_samples=slab_samples_for(fixed.spacing[2], moving.spacing[2]))
    save_metaimage(out, args.output)


def cmd_fuse(args):
    fixed = _load(args.fixed, "--fixed")
    moving = _load(args.moving, "--moving")
    save_metaimage(pipeline.fuse(fixed, moving, args.mode), args.output)


def cmd_phantom(args):
    spec = random_spec(args.seed, max_translation=args.max_translation, max_rotation_deg=args.max_rotation,
                       warp_max=args.warp_max, hotspot_ratio=args.hotspot_ratio, n_hotspots=args.n_hotspots)
    mri, pet, truth = make_pair(spec)
    out = _out_dir(args.out_dir)
    save_metaimage(mri, os.path.join(out, "mri.mhd"))
    save_metaimage(pet, os.path.join(out, "pet.mhd"))
    write_truth(truth, out)
    print(out)


# --------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        import numba

        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
    try:
        args.func(args)
    except UsageError as exc:
        print(f"petreg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"petreg {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

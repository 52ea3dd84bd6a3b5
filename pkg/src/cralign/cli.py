"""Command line entry point: ``cralign {register,apply,similarity,synth,eval}``.

Exit codes: 0 success, 2 bad input (files, formats, arguments, constant
images), 3 optimization divergence (the warped image left the fixed grid).
"""

import argparse
import csv
import logging
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .affine import AffineParams, warp, warp_matrix
from .document import read_document, write_document
from .errors import (ConstantTargetError, DocumentError, InvalidArgumentError, NiftiError,
                     NoAdmissiblePatchesError, NoOverlapError, SingularMatrixError)
from .nifti import read_nifti, write_nifti
from .optimizer import DEFAULT_FACTORS, DEFAULT_ITERS, OptimizerConfig, ScaleSchedule, multiscale_iso
from .similarity import MIN_VALID_FRACTION, ParzenConfig, PatchConfig, correlation_ratio, discrete_cr_oracle, \
    mutual_information
from .synth import PhantomSpec, TransformRanges, dice, make_phantom_pair, random_affine
from .volume import Volume, normalize_intensity

log = logging.getLogger("cralign")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DIVERGED = 3
# the transform seed of ``synth`` is offset from the phantom seed
TRANSFORM_SEED_OFFSET = 1000


class UsageError(Exception):
    pass


def _csv_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _csv_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _fmt(x):
    return repr(float(x))


def _plot_path(base, suffix):
    root, _ = os.path.splitext(base)
    return root + suffix


# -- register ------------------------------------------------------------


def cmd_register(args):
    if len(args.scales) != len(args.iters):
        raise UsageError("--scales and --iters must have the same length")
    moving = read_nifti(args.moving)
    fixed = read_nifti(args.fixed)
    init = None
    if args.init:
        init, _ = read_document(args.init)
        init.validate()
    sched = ScaleSchedule.for_metric(args.metric, args.scales, args.iters)
    lr = None if args.lr is None else (args.lr[0] if len(args.lr) == 1 else tuple(args.lr))
    if args.lr is not None and len(args.lr) not in (1, len(args.scales)):
        raise UsageError("--lr takes one value or one per scale")
    opt = OptimizerConfig(method=args.optimizer, lr=lr)
    cfg = ParzenConfig(num_bins=args.bins, bandwidth_ratio=args.bandwidth_ratio)
    patch = PatchConfig(patch_size=args.patch)

    def progress(factor, losses):
        log.info("factor %d: loss %.6f -> %.6f", factor, losses[0], losses[-1])

    result = multiscale_iso(normalize_intensity(moving), normalize_intensity(fixed), init, sched, cfg, patch,
                            opt, threads=args.threads, callback=progress)
    meta = {
        "metric": args.metric,
        "metric_per_scale": list(sched.metric_per_scale),
        "schedule": {"factors": list(sched.factors), "iters": list(sched.iters)},
        "optimizer": {"method": opt.method, "lr": [opt.lr_at(i, f) for i, f in enumerate(sched.factors)]},
        "parzen": {"num_bins": cfg.num_bins, "bandwidth_ratio": cfg.bandwidth_ratio, "patch_size": patch.patch_size},
        "seeds": [],
        "final_loss": result.loss_trace[-1][-1],
    }
    write_document(args.out_affine, result.params, fixed, moving, meta)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scale_factor", "iteration", "loss", "valid_fraction"])
            for f, i, loss, valid in result.trace_rows():
                w.writerow([f, i, _fmt(loss), _fmt(valid)])
    if args.out_warped:
        warped, _ = warp(moving, fixed, result.params)
        write_nifti(warped, args.out_warped)
    if args.plot:
        from .plotting import plot_loss_trace
        base = args.trace or args.out_affine
        plot_loss_trace(result.trace_rows(), _plot_path(base, "_loss.png"))
    print(f"final_loss={_fmt(result.loss_trace[-1][-1])}")
    return EXIT_OK


# -- apply ---------------------------------------------------------------


def cmd_apply(args):
    params, _ = read_document(args.affine)
    moving = read_nifti(args.moving)
    fixed = read_nifti(args.fixed)
    warped, _ = warp(moving, fixed, params, args.interp)
    dtype = np.int16 if args.interp == "nearest" and _is_integral(moving) else np.float32
    write_nifti(warped, args.out, dtype)
    return EXIT_OK


def _is_integral(vol):
    d = vol.data
    return bool(np.all(d == np.rint(d)) and d.min() >= -32768 and d.max() <= 32767)


# -- similarity ----------------------------------------------------------


def cmd_similarity(args):
    moving = read_nifti(args.moving)
    fixed = read_nifti(args.fixed)
    if args.affine:
        params, _ = read_document(args.affine)
    else:
        params = AffineParams.identity()
    m = normalize_intensity(moving)
    f = normalize_intensity(fixed)
    if args.affine or not m.same_grid(f):
        warped, valid = warp(m, f, params)
        x, y = warped.data[valid], f.data[valid]
    else:
        x, y = m.data.ravel(), f.data.ravel()
    if x.size < 2 or x.size < MIN_VALID_FRACTION * f.data.size:
        raise NoOverlapError("moving image does not overlap the fixed grid")
    if np.var(y) < 1e-12:
        raise ConstantTargetError("fixed image is constant")
    cfg = ParzenConfig(num_bins=args.bins, bandwidth_ratio=args.bandwidth_ratio)
    if args.metric == "cr":
        value = correlation_ratio(x, y, cfg)
    elif args.metric == "cr-discrete":
        value = discrete_cr_oracle(x, y, args.bins)
    else:
        value = mutual_information(x, y, cfg)
    print(f"{args.metric}={_fmt(value)} n_effective={x.size}")
    return EXIT_OK


# -- synth ---------------------------------------------------------------


def _ranges(values):
    if values is None:
        return TransformRanges()
    if len(values) != 5:
        raise UsageError("--ranges needs ROT_DEG,TRANS,SCALE_LO,SCALE_HI,SHEAR")
    rot, trans, lo, hi, shear = values
    return TransformRanges(math.radians(rot), trans, (lo, hi), shear)


def cmd_synth(args):
    if len(args.dims) != 3:
        raise UsageError("--dims needs three integers")
    if len(args.spacing) != 3:
        raise UsageError("--spacing needs three numbers")
    spec = PhantomSpec(tuple(args.dims), tuple(args.spacing), seed=args.seed)
    ranges = _ranges(args.ranges)
    ct, pet, labels = make_phantom_pair(spec)
    truth = random_affine(ranges, seed=args.seed + TRANSFORM_SEED_OFFSET, volume=ct)
    os.makedirs(args.out_dir, exist_ok=True)
    out = lambda name: os.path.join(args.out_dir, name)  # noqa: E731
    write_nifti(ct, out("ct.nii.gz"))
    write_nifti(pet, out("pet.nii.gz"))
    write_nifti(labels, out("labels.nii.gz"), np.int16)
    # warp what is on disk so that `apply` with the truth reproduces it exactly
    pet32 = Volume(pet.data.astype(np.float32), pet.spacing)
    moved, _ = warp(pet32, ct, truth)
    write_nifti(moved, out("pet_moved.nii.gz"))
    meta = {
        "kind": "synthetic truth",
        "seeds": {"phantom": args.seed, "transform": args.seed + TRANSFORM_SEED_OFFSET},
        "note": "pet_moved(x) = pet(M x); register --moving ct --fixed pet_moved estimates these params",
    }
    write_document(out("truth.affine"), truth, ct, pet, meta)
    return EXIT_OK


# -- eval ----------------------------------------------------------------


def cmd_eval(args):
    a = read_nifti(args.labels_a)
    b = read_nifti(args.labels_b)
    if not a.same_grid(b):
        raise InvalidArgumentError("label volumes are on different grids")
    per_label, mean = dice(a, b)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label_id", "dsc"])
        for lab in sorted(per_label):
            w.writerow([lab, _fmt(per_label[lab])])
        w.writerow(["mean", _fmt(mean)])
    if args.plot:
        from .plotting import plot_dice
        plot_dice(per_label, mean, _plot_path(args.out, "_dice.png"))
    print(f"mean_dsc={_fmt(mean)}")
    return EXIT_OK


# -- parser --------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="cralign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="estimate the affine transform aligning moving to fixed")
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--metric", choices=("cr", "mi"), default="cr")
    r.add_argument("--out-affine", required=True)
    r.add_argument("--out-warped")
    r.add_argument("--init", help="affine document used as the starting point")
    r.add_argument("--scales", type=_csv_ints, default=list(DEFAULT_FACTORS))
    r.add_argument("--iters", type=_csv_ints, default=list(DEFAULT_ITERS))
    r.add_argument("--bins", type=int, default=32)
    r.add_argument("--bandwidth-ratio", type=float, default=0.5)
    r.add_argument("--patch", type=int, default=16)
    r.add_argument("--lr", type=_csv_floats, default=None,
                   help="one learning rate or one per scale (default: 1e-4 at factor >= 4, 0.01 at 2, 0.003 at 1)")
    r.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    r.add_argument("--trace", help="CSV of per-step loss and valid fraction")
    r.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    r.add_argument("--plot", action="store_true", help="also write a PNG of the loss trace")
    r.set_defaults(func=cmd_register)

    a = sub.add_parser("apply", help="warp a volume with an affine document")
    a.add_argument("--affine", required=True)
    a.add_argument("--moving", required=True)
    a.add_argument("--fixed", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--interp", choices=("trilinear", "nearest"), default="trilinear")
    a.set_defaults(func=cmd_apply)

    s = sub.add_parser("similarity", help="print a similarity value")
    s.add_argument("--moving", required=True)
    s.add_argument("--fixed", required=True)
    s.add_argument("--metric", choices=("cr", "cr-discrete", "mi"), default="cr")
    s.add_argument("--affine")
    s.add_argument("--bins", type=int, default=32)
    s.add_argument("--bandwidth-ratio", type=float, default=0.5)
    s.set_defaults(func=cmd_similarity)

    y = sub.add_parser("synth", help="write a synthetic CT/PET phantom with a known transform")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--dims", type=_csv_ints, default=[64, 64, 64])
    y.add_argument("--spacing", type=_csv_floats, default=[2.8, 2.8, 3.8])
    y.add_argument("--ranges", type=_csv_floats, help="ROT_DEG,TRANS,SCALE_LO,SCALE_HI,SHEAR")
    y.add_argument("--out-dir", required=True)
    y.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="per-label Dice between two label volumes")
    e.add_argument("--labels-a", required=True)
    e.add_argument("--labels-b", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--plot", action="store_true", help="also write a PNG bar chart")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        # single-threaded BLAS keeps results independent of --threads
        with threadpool_limits(limits=1):
            return args.func(args)
    except (NoOverlapError, NoAdmissiblePatchesError) as exc:
        print(f"cralign: optimization diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, NiftiError, DocumentError, InvalidArgumentError, ConstantTargetError,
            SingularMatrixError, OSError) as exc:
        print(f"cralign: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

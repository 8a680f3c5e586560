"""Command-line front end.

Every command writes its outputs atomically and records a JSON manifest next
to the primary output (``<output>.manifest.json``) with the exact argv, the
resolved flags, library versions, and SHA-256 hashes of inputs and outputs.
``camnoise verify <manifest>`` re-checks input hashes and can rerun the
command to confirm bit-identical outputs.

Exit status: 0 success, 2 usage error, 3 I/O error, 4 numerical failure.
"""

import argparse
import json
import logging
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from ._io import atomic_write_text, sha256_file
from .bootstrap import BootstrapConfig, bootstrap_fit
from .evalbench import (
    DEFAULT_FRACTIONS,
    HistogramSpec,
    NoiseSpec,
    cell_phantom,
    gen_synthetic,
    heldout_loglik,
    psnr,
    run_ablation,
    smooth_phantom,
    split_pairs,
)
from .exceptions import DimensionMismatchError, FormatError, NumericalError
from .fitting import FitConfig, fit_gmm
from .inference import denoise_image
from .noise_model import VARIANCE_FLOOR, GmmNoiseModel, hist_build, load_model, save_model
from .stackio import GtImage, ImageStack, compute_gt, extract_pairs, load_gt, load_stack, save_gt, save_stack

logger = logging.getLogger("camnoise")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- argument types -----------------------------------------------------------


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _nonneg_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _cut(text):
    value = float(text)
    if not 0 <= value < 0.5:
        raise argparse.ArgumentTypeError(f"must lie in [0, 0.5), got {value}")
    return value


def _open_fraction(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of positive integers, got {text!r}")
    return values


def _bins_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if any(v < 2 for v in values):
        raise argparse.ArgumentTypeError(f"bin counts must be >= 2, got {text!r}")
    return values


def _fraction_list(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    if not values or any(not 0 < v <= 1 for v in values):
        raise argparse.ArgumentTypeError(f"fractions must lie in (0, 1], got {text!r}")
    return values


# -- parser -------------------------------------------------------------------


def _add_fit_flags(p):
    g = p.add_argument_group("GMM fitting")
    g.add_argument("--K", type=_positive_int, default=3, help="number of Gaussian components (default: %(default)s)")
    g.add_argument("--n", type=_positive_int, default=2, help="coefficients per polynomial (default: %(default)s)")
    g.add_argument("--c", type=_positive_float, default=VARIANCE_FLOOR,
                   help="variance floor in ADU^2 (default: %(default)s)")
    g.add_argument("--lr", type=_positive_float, default=0.1, help="ADAM learning rate (default: %(default)s)")
    g.add_argument("--batch", type=_positive_int, default=25_000, help="mini-batch size (default: %(default)s)")
    g.add_argument("--iters", type=_positive_int, default=4000, help="ADAM iterations (default: %(default)s)")
    g.add_argument("--init-scale", type=_nonneg_float, default=0.1,
                   help="half-width of the uniform coefficient initialisation (default: %(default)s)")
    g.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")


def _fit_config(args, K=None, n=None):
    return FitConfig(
        n_gaussians=args.K if K is None else K, n_coeffs=args.n if n is None else n, variance_floor=args.c,
        learning_rate=args.lr, batch_size=args.batch, iterations=args.iters, seed=args.seed,
        init_scale=args.init_scale,
    )


def build_parser():
    parser = argparse.ArgumentParser(prog="camnoise", description="Camera noise models: calibrate, fit, bootstrap, denoise.")
    parser.add_argument("--version", action="version", version=f"camnoise {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gt", help="average a calibration stack into a ground-truth image")
    p.add_argument("--stack", required=True, help="input calibration stack (NSTK or .npy)")
    p.add_argument("--out", required=True, help="output ground truth (1-frame NSTK)")

    p = sub.add_parser("fit-hist", help="build a histogram noise model from calibration data")
    p.add_argument("--stack", required=True, help="calibration stack")
    p.add_argument("--gt", help="ground truth image (default: mean of --stack)")
    p.add_argument("--bins", type=_positive_int, default=256, help="number of bins B per axis (default: %(default)s)")
    p.add_argument("--target", help="stack to be denoised; its min/max set the bin range (default: --stack)")
    p.add_argument("--min", dest="min_val", type=float, help="lower bin edge (overrides --target)")
    p.add_argument("--max", dest="max_val", type=float, help="upper bin edge (overrides --target)")
    p.add_argument("--pseudo-count", type=_nonneg_float, default=0.0,
                   help="additive smoothing per cell (default: %(default)s, raw frequencies)")
    p.add_argument("--out", required=True, help="output model (NMDL)")

    p = sub.add_parser("fit-gmm", help="fit a GMM noise model to calibration data by maximum likelihood")
    p.add_argument("--stack", required=True, help="calibration stack")
    p.add_argument("--gt", help="ground truth image (default: mean of --stack)")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="output model (NMDL)")
    p.add_argument("--trace", help="NLL trace CSV (default: <out>.trace.csv)")

    p = sub.add_parser("bootstrap", help="build a noise model from noisy data without calibration")
    p.add_argument("--stack", required=True, help="noisy stack to be denoised")
    p.add_argument("--pseudo-gt", help="externally denoised stack aligned frame-for-frame (default: blind-spot filter)")
    p.add_argument("--kind", choices=("gmm", "hist"), default="gmm", help="model family (default: %(default)s)")
    p.add_argument("--cut", type=_cut, default=0.005,
                   help="fraction of pseudo-GT signals dropped at each end (default: %(default)s)")
    p.add_argument("--radius", type=_positive_int, default=2, help="blind-spot window radius (default: %(default)s)")
    p.add_argument("--bins", type=_positive_int, default=256, help="histogram bins for --kind hist (default: %(default)s)")
    p.add_argument("--filter-hist", action="store_true", help="apply --cut to histogram bootstraps too")
    p.add_argument("--per-image", action="store_true", help="compute the percentile cut per frame")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="output model (NMDL)")
    p.add_argument("--pseudo-gt-out", help="also write the pseudo ground truth stack here")

    p = sub.add_parser("eval", help="held-out log-likelihood of a model and/or PSNR of an estimate")
    p.add_argument("--model", help="noise model (NMDL)")
    p.add_argument("--stack", help="held-out noisy stack for the likelihood")
    p.add_argument("--gt", help="ground truth (default for --stack: its frame mean)")
    p.add_argument("--estimate", help="denoised image for PSNR against --gt")
    p.add_argument("--peak", type=_positive_float, help="PSNR peak (default: dynamic range of --gt)")
    p.add_argument("--out", required=True, help="output JSON report")

    p = sub.add_parser("sample", help="draw noisy frames from a GMM noise model")
    p.add_argument("--model", required=True, help="GMM noise model (NMDL)")
    p.add_argument("--gt", required=True, help="clean image (1-frame NSTK)")
    p.add_argument("--frames", type=_positive_int, default=1, help="number of frames (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", required=True, help="output stack (NSTK)")

    p = sub.add_parser("ablate", help="robustness curves and (K, n) sweeps on calibration data")
    p.add_argument("--stack", required=True, help="calibration stack")
    p.add_argument("--gt", help="ground truth image (default: mean of --stack)")
    p.add_argument("--mode", choices=("range", "count"), default="range", help="ablation type (default: %(default)s)")
    p.add_argument("--fractions", type=_fraction_list, default=list(DEFAULT_FRACTIONS),
                   help="comma-separated keep fractions (default: 1,0.7,0.5,0.3,0.1)")
    p.add_argument("--K-grid", dest="K_grid", type=_int_list, help="comma-separated K values to sweep (default: --K)")
    p.add_argument("--n-grid", dest="n_grid", type=_int_list, help="comma-separated n values to sweep (default: --n)")
    p.add_argument("--hist-bins", type=_bins_list, default=[256],
                   help="comma-separated histogram bin counts; empty string disables (default: 256)")
    p.add_argument("--pseudo-count", type=_nonneg_float, default=0.0, help="histogram smoothing (default: %(default)s)")
    p.add_argument("--heldout-fraction", type=_open_fraction, default=0.5,
                   help="share of pairs held out for evaluation (default: %(default)s)")
    _add_fit_flags(p)
    p.add_argument("--out", required=True, help="output curve table (CSV)")
    p.add_argument("--gnuplot", help="also write a gnuplot data file")

    p = sub.add_parser("denoise", help="MMSE denoising with a noise model and a patch prior")
    p.add_argument("--stack", required=True, help="noisy stack")
    p.add_argument("--model", required=True, help="noise model (NMDL)")
    p.add_argument("--radius", type=_positive_int, default=2, help="prior window radius (default: %(default)s)")
    p.add_argument("--count", type=_positive_int, default=24, help="prior samples per pixel (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", required=True, help="output MMSE stack (NSTK)")
    p.add_argument("--prior-mean-out", help="also write the prior-mean baseline stack")

    p = sub.add_parser("synth", help="generate a synthetic noisy stack")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--gt", help="clean image (1-frame NSTK)")
    src.add_argument("--phantom", choices=("smooth", "cells"), help="generate a clean phantom instead")
    p.add_argument("--width", type=_positive_int, default=128, help="phantom width (default: %(default)s)")
    p.add_argument("--height", type=_positive_int, default=128, help="phantom height (default: %(default)s)")
    p.add_argument("--low", type=float, default=200.0, help="phantom minimum (default: %(default)s)")
    p.add_argument("--high", type=float, default=2000.0, help="phantom maximum (default: %(default)s)")
    p.add_argument("--noise", choices=("gaussian", "poisson-gaussian", "gmm"), default="gaussian",
                   help="noise process (default: %(default)s)")
    p.add_argument("--sigma", type=_positive_float, default=30.0, help="Gaussian sigma (default: %(default)s)")
    p.add_argument("--gain", type=_positive_float, default=1.0, help="Poisson gain ADU/e- (default: %(default)s)")
    p.add_argument("--offset", type=float, default=0.0, help="Poisson offset ADU (default: %(default)s)")
    p.add_argument("--read-sigma", type=_nonneg_float, default=0.0, help="read noise sigma (default: %(default)s)")
    p.add_argument("--noise-model", help="GMM noise model for --noise gmm")
    p.add_argument("--frames", type=_positive_int, default=100, help="number of frames (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--out", required=True, help="output stack (NSTK)")
    p.add_argument("--gt-out", help="write the clean image here (useful with --phantom)")

    p = sub.add_parser("verify", help="check a run manifest's input hashes, optionally rerunning the command")
    p.add_argument("manifest", help="path to a .manifest.json")
    p.add_argument("--rerun", action="store_true", help="rerun into a temp dir and compare output hashes")
    return parser


# -- helpers --------------------------------------------------------------------


class Run:
    """Tracks inputs/outputs of one command for its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = {}

    def input(self, path):
        if path is None:
            return None
        if not os.path.exists(path):
            raise FileNotFoundError(f"input not found: {path}")
        self.inputs[str(path)] = sha256_file(path)
        return path

    def output(self, flag, path):
        self.outputs[flag] = str(path)
        return path

    def manifest(self):
        flags = {k: v for k, v in vars(self.args).items() if k not in ("func", "verbose")}
        return {
            "command": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "flags": flags,
            "seed": flags.get("seed"),
            "versions": {
                "camnoise": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__,
                "python": platform.python_version(),
            },
            "inputs": self.inputs,
            "outputs": {flag: {"path": p, "sha256": sha256_file(p)} for flag, p in self.outputs.items()},
        }

    def write_manifest(self, primary):
        atomic_write_text(f"{primary}.manifest.json", json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


def _load_calibration(run, args):
    stack = load_stack(run.input(args.stack))
    gt = load_gt(run.input(args.gt)) if args.gt else compute_gt(stack)
    return stack, gt


def _write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------


def cmd_gt(run, args):
    stack = load_stack(run.input(args.stack))
    save_gt(compute_gt(stack), run.output("--out", args.out))


def cmd_fit_hist(run, args):
    stack, gt = _load_calibration(run, args)
    pairs = extract_pairs(stack, gt)
    target = load_stack(run.input(args.target)) if args.target else stack
    lo = float(target.data.min()) if args.min_val is None else args.min_val
    hi = float(target.data.max()) if args.max_val is None else args.max_val
    if hi <= lo:
        if args.min_val is not None and args.max_val is not None:
            raise UsageError(f"--max ({hi}) must exceed --min ({lo})")
        hi = lo + 1.0
    save_model(hist_build(pairs, args.bins, lo, hi, args.pseudo_count), run.output("--out", args.out))


def cmd_fit_gmm(run, args):
    stack, gt = _load_calibration(run, args)
    report = fit_gmm(extract_pairs(stack, gt), _fit_config(args))
    trace = args.trace or f"{args.out}.trace.csv"
    _write_trace(report, run.output("--trace", trace))
    save_model(report.final_model, run.output("--out", args.out))


def _write_trace(report, path):
    lines = ["iteration,mean_nll"] + [f"{it},{float(nll)!r}" for it, nll in report.nll_trace]
    atomic_write_text(path, "\n".join(lines) + "\n")


def cmd_bootstrap(run, args):
    stack = load_stack(run.input(args.stack))
    pseudo = load_stack(run.input(args.pseudo_gt)) if args.pseudo_gt else None
    config = BootstrapConfig(
        model_kind="gmm" if args.kind == "gmm" else "histogram", percentile_cut=args.cut, radius=args.radius,
        bins=args.bins, fit=_fit_config(args), filter_histogram=args.filter_hist, per_image=args.per_image,
    )
    model, report, pseudo_stack = bootstrap_fit(stack, config, pseudo)
    if args.pseudo_gt_out:
        save_stack(pseudo_stack, run.output("--pseudo-gt-out", args.pseudo_gt_out))
    if report is not None:
        _write_trace(report, run.output("--trace", f"{args.out}.trace.csv"))
    save_model(model, run.output("--out", args.out))


def cmd_eval(run, args):
    if args.model is None and args.estimate is None:
        raise UsageError("eval needs --model (likelihood) and/or --estimate (PSNR)")
    report = {}
    if args.model is not None:
        if args.stack is None:
            raise UsageError("--model requires --stack")
        model = load_model(run.input(args.model))
        stack = load_stack(run.input(args.stack))
        gt = load_gt(run.input(args.gt)) if args.gt else compute_gt(stack)
        pairs = extract_pairs(stack, gt)
        report["heldout_ll_nats"] = heldout_loglik(model, pairs)
        report["pairs"] = len(pairs)
    if args.estimate is not None:
        if args.gt is None:
            raise UsageError("--estimate requires --gt")
        gt = load_gt(run.input(args.gt))
        est = load_stack(run.input(args.estimate))
        values = [psnr(gt, frame, args.peak) for frame in est.data]
        report["psnr_db"] = [v if np.isfinite(v) else "identical" for v in values]
    _write_json(run.output("--out", args.out), report)
    print(json.dumps(report, sort_keys=True))


def cmd_sample(run, args):
    model = load_model(run.input(args.model))
    if not isinstance(model, GmmNoiseModel):
        raise UsageError("sample needs a GMM noise model")
    gt = load_gt(run.input(args.gt))
    stack = gen_synthetic(gt, NoiseSpec("gmm", model=model, seed=args.seed), args.frames)
    save_stack(stack, run.output("--out", args.out))


def cmd_ablate(run, args):
    stack, gt = _load_calibration(run, args)
    train, heldout = split_pairs(extract_pairs(stack, gt), args.heldout_fraction, seed=args.seed)
    configs = [_fit_config(args, K, n) for K in (args.K_grid or [args.K]) for n in (args.n_grid or [args.n])]
    configs += [HistogramSpec(b, args.pseudo_count) for b in args.hist_bins]
    result = run_ablation(train, heldout, args.fractions, configs, mode=args.mode, seed=args.seed)
    for row in result.rows:
        if not np.isfinite(row.final_nll) and row.model_kind == "gmm":
            raise NumericalError(f"non-finite NLL for K={row.K}, n={row.n} at fraction {row.fraction}")
    if args.gnuplot:
        _write_via_temp(result.write_gnuplot, run.output("--gnuplot", args.gnuplot))
    _write_via_temp(result.write_csv, run.output("--out", args.out))


def _write_via_temp(writer, path):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def cmd_denoise(run, args):
    stack = load_stack(run.input(args.stack))
    model = load_model(run.input(args.model))
    out = [denoise_image(frame, model, args.radius, args.count, args.seed + j) for j, frame in enumerate(stack.data)]
    if args.prior_mean_out:
        save_stack(ImageStack(np.stack([o[1] for o in out])), run.output("--prior-mean-out", args.prior_mean_out))
    save_stack(ImageStack(np.stack([o[0] for o in out])), run.output("--out", args.out))


def cmd_synth(run, args):
    if args.gt:
        gt = load_gt(run.input(args.gt))
    else:
        if not args.high > args.low:
            raise UsageError("--high must exceed --low")
        make = smooth_phantom if args.phantom == "smooth" else cell_phantom
        gt = make(args.height, args.width, args.low, args.high, seed=args.seed)
    if args.noise == "gmm":
        if not args.noise_model:
            raise UsageError("--noise gmm requires --noise-model")
        model = load_model(run.input(args.noise_model))
        if not isinstance(model, GmmNoiseModel):
            raise UsageError("--noise-model must be a GMM model")
        spec = NoiseSpec("gmm", model=model, seed=args.seed)
    elif args.noise == "poisson-gaussian":
        spec = NoiseSpec("poisson_gaussian", gain=args.gain, offset=args.offset, read_sigma=args.read_sigma,
                         seed=args.seed)
    else:
        spec = NoiseSpec("gaussian", sigma=args.sigma, seed=args.seed)
    if args.gt_out:
        save_gt(GtImage(gt.data), run.output("--gt-out", args.gt_out))
    save_stack(gen_synthetic(gt, spec, args.frames), run.output("--out", args.out))


COMMANDS = {
    "gt": cmd_gt,
    "fit-hist": cmd_fit_hist,
    "fit-gmm": cmd_fit_gmm,
    "bootstrap": cmd_bootstrap,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "ablate": cmd_ablate,
    "denoise": cmd_denoise,
    "synth": cmd_synth,
}


def verify_manifest(path, rerun=False):
    """Return a list of problems (empty when the manifest checks out)."""
    with open(path) as fh:
        manifest = json.load(fh)
    old_cwd = os.getcwd()
    os.chdir(manifest.get("cwd", old_cwd))
    try:
        return _verify(manifest, rerun)
    finally:
        os.chdir(old_cwd)


def _verify(manifest, rerun):
    problems = []
    for inp, digest in manifest["inputs"].items():
        if not os.path.exists(inp):
            problems.append(f"missing input {inp}")
        elif sha256_file(inp) != digest:
            problems.append(f"input changed: {inp}")
    if rerun and not problems:
        argv = list(manifest["argv"])
        with tempfile.TemporaryDirectory() as tmp:
            redirected = {}
            for flag, info in manifest["outputs"].items():
                new = os.path.join(tmp, Path(info["path"]).name)
                redirected[flag] = new
                if flag in argv:
                    argv[argv.index(flag) + 1] = new
            # implicit outputs (e.g. the trace beside --out) follow --out
            if "--out" in redirected:
                for flag, info in manifest["outputs"].items():
                    if flag not in argv and info["path"].startswith(manifest["outputs"]["--out"]["path"]):
                        suffix = info["path"][len(manifest["outputs"]["--out"]["path"]):]
                        redirected[flag] = redirected["--out"] + suffix
            status = main(argv)
            if status != EXIT_OK:
                problems.append(f"rerun exited with status {status}")
            else:
                for flag, info in manifest["outputs"].items():
                    if sha256_file(redirected[flag]) != info["sha256"]:
                        problems.append(f"output differs on rerun: {flag} ({info['path']})")
    return problems


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)

    if args.command == "verify":
        try:
            problems = verify_manifest(args.manifest, args.rerun)
        except (OSError, ValueError, KeyError) as exc:
            print(f"camnoise verify: {exc}", file=sys.stderr)
            return EXIT_IO
        for p in problems:
            print(p, file=sys.stderr)
        if not problems:
            print("manifest OK")
        return EXIT_OK if not problems else EXIT_IO

    run = Run(args, argv)
    try:
        COMMANDS[args.command](run, args)
        run.write_manifest(args.out)
    except UsageError as exc:
        print(f"camnoise {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"camnoise {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, DimensionMismatchError) as exc:
        print(f"camnoise {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"camnoise {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

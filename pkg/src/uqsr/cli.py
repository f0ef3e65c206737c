"""Command-line entry point: simulate | train | predict | decompose |
risk | eval | gradcheck.

Every run writes a JSON manifest next to its primary output recording the
resolved configuration, seeds, input/output hashes and wall-clock
timings. Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numerical fault.
"""

from __future__ import annotations

import argparse
import difflib
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, parallel
from .errors import (ContractError, DimensionError, FormatError,
                     GeometryError, NumericalFault, StateError, UqsrError)

_KNOWN_FLAGS: set[str] = set()


class _Parser(argparse.ArgumentParser):
    """argparse with exit code 1 and a typo suggestion for unknown flags."""

    def error(self, message):
        extra = ""
        if "unrecognized arguments:" in message:
            for tok in message.split(":", 1)[1].split():
                if tok.startswith("-"):
                    close = difflib.get_close_matches(tok, sorted(_KNOWN_FLAGS), 1)
                    if close:
                        extra = f" (did you mean {close[0]}?)"
                    break
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}{extra}", file=sys.stderr)
        raise SystemExit(1)

    def add_argument(self, *args, **kwargs):
        for a in args:
            if isinstance(a, str) and a.startswith("-"):
                _KNOWN_FLAGS.add(a)
        return super().add_argument(*args, **kwargs)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, command, config):
        config = {k: v for k, v in config.items() if k not in ("func", "threads")}
        self.doc = {
            "command": command,
            "config": config,
            "version": __version__,
            "inputs": {},
            "outputs": {},
            "timings": {},
        }
        self._t0 = time.time()

    def add_input(self, path):
        self.doc["inputs"][str(path)] = _sha256(path)

    def add_output(self, path):
        self.doc["outputs"][str(path)] = _sha256(path)

    def write(self, path):
        self.doc["timings"]["wall_seconds"] = round(time.time() - self._t0, 3)
        with open(path, "w") as f:
            json.dump(self.doc, f, indent=2, sort_keys=True)
            f.write("\n")


def _write_pgm(path, img):
    """8-bit grayscale PGM (min-max normalized)."""
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    b = ((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (b.shape[1], b.shape[0]))
        f.write(np.ascontiguousarray(b).tobytes())


def _maybe_slice(args, vol, stem, manifest):
    if getattr(args, "slice", None):
        axis, idx = args.slice.split("=")
        idx = int(idx)
        if axis not in "xyz":
            raise ContractError(f"--slice expects x=K, y=K or z=K, got {args.slice!r}")
        sl = [slice(None)] * 3
        sl["xyz".index(axis)] = idx
        img = vol.data[tuple(sl)].mean(axis=-1)
        path = f"{stem}.{axis}{idx}.pgm"
        _write_pgm(path, img)
        manifest.add_output(path)


# ------------------------------------------------------------ subcommands

def _cmd_simulate(args):
    from .phantom import PhantomSpec, generate_phantom, inject_outliers
    from .volume import write_volume

    dims = [int(v) for v in args.dims.split(",")]
    if len(dims) == 1:
        dims = dims * 3
    anomaly = None
    if args.anomaly:
        parts = [float(v) for v in args.anomaly.split(",")]
        if len(parts) not in (4, 5):
            raise ContractError("--anomaly expects cx,cy,cz,radius[,value]")
        anomaly = {"center": parts[:3], "radius": parts[3]}
        if len(parts) == 5:
            anomaly["value"] = parts[4]
    lo, hi = (float(v) for v in args.aniso.split(","))
    spec = PhantomSpec(dims=tuple(dims), seed=args.seed,
                       structure_scale=args.scale, aniso_range=(lo, hi),
                       anomaly=anomaly, outlier_fraction=args.outlier_fraction)
    manifest = Manifest("simulate", {**vars(args)})
    vol = generate_phantom(spec)
    if spec.outlier_fraction > 0:
        vol, corrupted = inject_outliers(vol, spec.outlier_fraction,
                                         args.outlier_magnitude, seed=args.seed)
        cpath = args.out + ".outliers.uqv"
        from .volume import Volume4D

        write_volume(Volume4D(corrupted[..., None].astype(np.float32),
                              vol.spacing), cpath)
        manifest.add_output(cpath)
    write_volume(vol, args.out, allow_nan=args.allow_nan)
    with open(args.out + ".json", "w") as f:
        f.write(spec.to_json() + "\n")
    manifest.add_output(args.out)
    manifest.add_output(args.out + ".json")
    _maybe_slice(args, vol, args.out, manifest)
    manifest.write(args.out + ".manifest.json")
    return 0


def _build_arch(args, channels):
    from .networks import NetworkSpec

    mode = "heteroscedastic" if args.loss in ("hetero", "hetero+elbo") else "baseline"
    return NetworkSpec.sr_default(rate=args.r, channels=channels, mode=mode,
                                  dropout=args.dropout)


def _cmd_train(args):
    from . import patches as pp
    from .networks import build_network, save_checkpoint
    from .training import TrainConfig, history_csv, train
    from .volume import read_volume

    manifest = Manifest("train", {**vars(args)})
    hi = read_volume(args.data)
    manifest.add_input(args.data)
    if args.lowres:
        lo = read_volume(args.lowres)
        manifest.add_input(args.lowres)
    else:
        lo = pp.simulate_lowres(hi, args.r)
    stats = pp.fit_norm_stats(hi)
    margin = _build_arch(args, hi.dims[3]).margin
    pairs = pp.extract_patch_pairs(hi, lo, n=args.patch, r=args.r,
                                   margin=margin, count=args.pairs,
                                   seed=args.seed)
    pairs = pp.apply_norm(pairs, stats, clip=not args.no_clip)

    rc = 0
    for rep in range(args.repeat):
        seed = args.seed + rep
        spec = _build_arch(args, hi.dims[3])
        net = build_network(spec, init_seed=seed)
        cfg = TrainConfig(lr=args.lr, batch=args.batch, epochs=args.epochs,
                          S=args.S, val_fraction=args.val_fraction, seed=seed,
                          loss=args.loss, val_mc=args.val_mc)
        result = train(net, pairs, cfg)
        out = args.out if args.repeat == 1 else f"{args.out}.{rep}"
        save_checkpoint(out, net, norm_stats=stats.to_dict(), metadata={
            "loss": args.loss, "patch": args.patch, "pairs": args.pairs,
            "epochs": args.epochs, "seed": seed,
            "best_epoch": result.best_epoch,
            "best_val_mse": result.best_val_mse,
            "aborted": result.aborted,
        })
        manifest.add_output(out)
        if args.history:
            hpath = args.history if args.repeat == 1 else f"{args.history}.{rep}"
            with open(hpath, "w") as f:
                f.write(history_csv(result.history))
            manifest.add_output(hpath)
        if result.aborted:
            print(f"training diverged (NaN loss); kept last good weights in {out}",
                  file=sys.stderr)
            rc = 3
    manifest.write(args.out + ".manifest.json")
    return rc


def _load_checkpoints(paths, vol):
    from . import patches as pp
    from .networks import load_checkpoint

    nets, stats_ref = [], None
    for path in paths:
        net, stats_d, _meta = load_checkpoint(path)
        if net.spec.channels != vol.dims[3]:
            raise ContractError(
                f"checkpoint {path} expects {net.spec.channels} channels, "
                f"volume has {vol.dims[3]}"
            )
        if stats_d is None:
            raise ContractError(f"checkpoint {path} carries no normalization stats")
        if stats_ref is None:
            stats_ref = stats_d
        elif any(np.asarray(stats_ref[k]) .tolist() != np.asarray(stats_d[k]).tolist()
                 for k in ("mean", "std")):
            raise ContractError("ensemble checkpoints disagree on norm stats")
        nets.append(net)
    r = nets[0].spec.rate
    if any(n.spec.rate != r for n in nets):
        raise ContractError("ensemble checkpoints disagree on upsampling rate")
    return nets, pp.NormStats.from_dict(stats_ref)


def _cmd_predict(args):
    from .inference import InferenceConfig, superresolve_volume
    from .volume import read_volume, write_volume

    manifest = Manifest("predict", {**vars(args)})
    lo = read_volume(args.input)
    manifest.add_input(args.input)
    nets, stats = _load_checkpoints(args.checkpoint, lo)
    for c in args.checkpoint:
        manifest.add_input(c)
    cfg = InferenceConfig(T=args.T, J=max(2, args.J), seed=args.seed,
                          patch=args.patch)
    sr = superresolve_volume(nets if len(nets) > 1 else nets[0], lo, cfg, stats)
    for tag, vol in (("mean", sr.mean), ("var", sr.variance)):
        path = f"{args.out}.{tag}.uqv"
        write_volume(vol, path)
        manifest.add_output(path)
    _maybe_slice(args, sr.mean, args.out + ".mean", manifest)
    manifest.write(args.out + ".manifest.json")
    return 0


def _cmd_decompose(args):
    from .inference import DerivedQuantity, InferenceConfig, superresolve_volume
    from .volume import read_volume, write_volume

    manifest = Manifest("decompose", {**vars(args)})
    lo = read_volume(args.input)
    manifest.add_input(args.input)
    nets, stats = _load_checkpoints([args.checkpoint], lo)
    net = nets[0]
    if net.spec.mode != "heteroscedastic":
        raise ContractError("decompose needs a heteroscedastic checkpoint")
    manifest.add_input(args.checkpoint)
    derived = []
    for tag in (t for t in args.g.split(",") if t and t != "identity"):
        derived.append(DerivedQuantity(tag))
    cfg = InferenceConfig(T=args.T, J=args.J, seed=args.seed, patch=args.patch)
    sr = superresolve_volume(net, lo, cfg, stats, derived=tuple(derived))
    outs = {"mean": sr.mean, "var": sr.variance,
            "intrinsic": sr.intrinsic, "parameter": sr.parameter}
    for tag, vol in outs.items():
        path = f"{args.out}.{tag}.uqv"
        write_volume(vol, path)
        manifest.add_output(path)
    for g, maps in sr.derived.items():
        for part, vol in maps.items():
            path = f"{args.out}.{g}.{part}.uqv"
            write_volume(vol, path)
            manifest.add_output(path)
    _maybe_slice(args, sr.mean, args.out + ".mean", manifest)
    manifest.write(args.out + ".manifest.json")
    return 0


def _cmd_risk(args):
    from .inference import DerivedQuantity
    from .risk import error_map, label_safe, roc_curve, select_threshold_f1, warning_map
    from .volume import Volume4D, read_volume, write_volume

    manifest = Manifest("risk", {**vars(args)})
    unc = read_volume(args.uncertainty)
    manifest.add_input(args.uncertainty)
    u = unc.data.mean(axis=-1)          # channel-mean uncertainty score

    threshold = args.threshold
    curve = None
    if args.pred and args.truth:
        pred = read_volume(args.pred)
        truth = read_volume(args.truth)
        manifest.add_input(args.pred)
        manifest.add_input(args.truth)
        g = DerivedQuantity(args.g)
        err = error_map(g.apply(pred.data.astype(np.float64)),
                        g.apply(truth.data.astype(np.float64)))
        labels = label_safe(err, args.rmse_threshold)
        mask = truth.mask if truth.mask is not None else None
        valid = pred.mask if pred.mask is not None else None
        roi = None
        if mask is not None:
            roi = mask if valid is None else (mask & valid)
        elif valid is not None:
            roi = valid
        curve = roc_curve(u, labels, roi)
        if threshold is None:
            threshold = select_threshold_f1(curve)
        if args.roc:
            with open(args.roc, "w") as f:
                f.write(curve.to_csv())
            manifest.add_output(args.roc)
    if threshold is None:
        raise ContractError("need --threshold or (--pred and --truth) to fit one")
    wm = warning_map(u, threshold)
    write_volume(Volume4D(wm[..., None].astype(np.float32), unc.spacing,
                          unc.mask), args.warning)
    manifest.add_output(args.warning)
    manifest.doc["config"]["fitted_threshold"] = float(threshold)
    if curve is not None:
        manifest.doc["config"]["auc"] = curve.auc
        print(f"auc {curve.auc:.4f}  threshold {threshold:.6g}")
    else:
        print(f"threshold {threshold:.6g}")
    manifest.write(args.warning + ".manifest.json")
    return 0


def _cmd_eval(args):
    from .training import region_metrics
    from .volume import foreground_mask, read_volume

    manifest = Manifest("eval", {**vars(args)})
    pred = read_volume(args.pred)
    truth = read_volume(args.truth)
    manifest.add_input(args.pred)
    manifest.add_input(args.truth)
    from .patches import simulate_lowres

    lo = simulate_lowres(truth, args.r)
    lo_mask = lo.mask if lo.mask is not None else foreground_mask(lo)
    exclude = None
    if args.exclude:
        exclude = read_volume(args.exclude).data[..., 0] > 0.5
        manifest.add_input(args.exclude)
    metrics = region_metrics(pred.data, truth.data, lo_mask, args.r,
                             args.margin, patch=args.patch or None,
                             exclude=exclude)
    lines = ["region,rmse,psnr,voxels"]
    for region in ("interior", "exterior"):
        if region in metrics:
            m = metrics[region]
            lines.append(f"{region},{m['rmse']:.9g},{m['psnr']:.6g},{m['voxels']}")
            print(f"{region}: rmse {m['rmse']:.6g}  psnr {m['psnr']:.4g} dB "
                  f"({m['voxels']} voxels)")
        else:
            lines.append(f"{region},,,0")
            print(f"{region}: absent (no voxels)")
    if args.out:
        with open(args.out, "w") as f:
            f.write("\n".join(lines) + "\n")
        manifest.add_output(args.out)
        manifest.write(args.out + ".manifest.json")
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import run_gradcheck_suite

    results = run_gradcheck_suite(seed=args.seed)
    ok = True
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        ok &= err < 1e-4
        print(f"{name:12s} max relative error {err:.3e}  {status}")
    return 0 if ok else 3


# ----------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="uqsr", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: UQSR_THREADS or 1)")

    sp = sub.add_parser("simulate", help="generate a ground-truth phantom")
    common(sp)
    sp.add_argument("--dims", default="64", help="X[,Y,Z] voxels")
    sp.add_argument("--scale", type=float, default=12.0)
    sp.add_argument("--aniso", default="0.3,1.2")
    sp.add_argument("--anomaly", default=None, help="cx,cy,cz,radius[,value]")
    sp.add_argument("--outlier-fraction", type=float, default=0.0)
    sp.add_argument("--outlier-magnitude", type=float, default=3.0)
    sp.add_argument("--allow-nan", action="store_true")
    sp.add_argument("--slice", default=None, help="axis=index PGM export")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_simulate)

    sp = sub.add_parser("train", help="train a super-resolution model")
    common(sp)
    sp.add_argument("--data", required=True, help="high-res UQV1 volume")
    sp.add_argument("--lowres", default=None, help="optional measured low-res volume")
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--loss", default="mse",
                    choices=["mse", "hetero", "elbo", "hetero+elbo"])
    sp.add_argument("--dropout", default="none",
                    help="none | var1 | var2 | gauss:p")
    sp.add_argument("--patch", type=int, default=11)
    sp.add_argument("--pairs", type=int, default=2000)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--batch", type=int, default=12)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--val-fraction", type=float, default=0.5)
    sp.add_argument("--val-mc", type=int, default=8)
    sp.add_argument("--S", type=int, default=1)
    sp.add_argument("--no-clip", action="store_true",
                    help="skip percentile clipping of training data")
    sp.add_argument("--repeat", type=int, default=1)
    sp.add_argument("--history", default=None, help="CSV path for epoch history")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("predict", help="super-resolve a low-res volume")
    common(sp)
    sp.add_argument("--checkpoint", action="append", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True, help="output stem")
    sp.add_argument("--T", type=int, default=200)
    sp.add_argument("--J", type=int, default=10)
    sp.add_argument("--patch", type=int, default=16)
    sp.add_argument("--slice", default=None)
    sp.set_defaults(func=_cmd_predict)

    sp = sub.add_parser("decompose", help="uncertainty decomposition maps")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True, help="output stem")
    sp.add_argument("--T", type=int, default=200)
    sp.add_argument("--J", type=int, default=10)
    sp.add_argument("--g", default="", help="comma list: md,fa")
    sp.add_argument("--patch", type=int, default=16)
    sp.add_argument("--slice", default=None)
    sp.set_defaults(func=_cmd_decompose)

    sp = sub.add_parser("risk", help="ROC, F1 threshold and warning mask")
    common(sp)
    sp.add_argument("--uncertainty", required=True)
    sp.add_argument("--pred", default=None)
    sp.add_argument("--truth", default=None)
    sp.add_argument("--g", default="identity", choices=["identity", "md", "fa"])
    sp.add_argument("--rmse-threshold", type=float, default=1.5e-4)
    sp.add_argument("--threshold", type=float, default=None,
                    help="apply this uncertainty threshold instead of fitting")
    sp.add_argument("--roc", default=None, help="ROC CSV path")
    sp.add_argument("--warning", required=True, help="warning-mask UQV1 path")
    sp.set_defaults(func=_cmd_risk)

    sp = sub.add_parser("eval", help="region RMSE/PSNR of a prediction")
    common(sp)
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--margin", type=int, default=4)
    sp.add_argument("--patch", type=int, default=0,
                    help="region tile side (0: receptive field)")
    sp.add_argument("--exclude", default=None, help="corruption mask UQV1")
    sp.add_argument("--out", default=None, help="metrics CSV path")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(sp)
    sp.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    threads = args.threads if args.threads else parallel.default_threads()
    parallel.set_threads(threads)
    try:
        return args.func(args)
    except NumericalFault as exc:
        print(f"uqsr: numerical fault: {exc}", file=sys.stderr)
        return 3
    except (UqsrError, FileNotFoundError, IsADirectoryError, OSError) as exc:
        print(f"uqsr: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

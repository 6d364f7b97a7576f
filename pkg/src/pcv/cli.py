"""Command-line front end: ``pcv gen-data | train | attack | verify | reach``.

Exit status: 0 success, 1 tipping point found, 2 usage error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from . import data, pointnet, reach, report, training, verifier
from .errors import (FormatError, NumericError, ParseError, SoundnessError, TrainingError,
                     UsageError)

DEFAULT_EPSILONS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)

EXIT_OK, EXIT_TIPPING, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_epsilons(text):
    try:
        eps = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad epsilon list {text!r}") from None
    if not eps:
        raise UsageError("epsilon list is empty")
    if any(e < 0 for e in eps) or eps != sorted(eps):
        raise UsageError(f"epsilons must be non-negative and ascending: {text}")
    return eps


def _thread_limit():
    raw = os.environ.get("PCV_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PCV_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"PCV_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _require(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise UsageError(f"{what} path does not exist: {path}")
    return Path(path)


def _load_val(args):
    manifest = data.DatasetManifest.load(_require(args.data, "data"))
    split = "val" if "val" in manifest.splits else next(iter(manifest.splits))
    return manifest, manifest.load_split(split)


def _load_model(args):
    return pointnet.load(_require(args.model, "model"))


def _out_dir(args):
    if args.out is None:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args):
    out = _out_dir(args)
    if args.off is not None:
        manifest = data.build_off_dataset(_require(args.off, "off"), out, args.points, args.seed)
    else:
        if not 2 <= args.classes <= len(data.SHAPE_KINDS):
            raise UsageError(f"--classes must be in [2, {len(data.SHAPE_KINDS)}]")
        cfg = data.DatasetConfig(
            classes=data.SHAPE_KINDS[:args.classes], per_class=args.per_class,
            num_points=args.points, jitter=args.jitter, val_fraction=args.val_fraction,
        )
        manifest = data.build_dataset(cfg, args.seed, out)
    sizes = ", ".join(f"{k}={len(v)}" for k, v in manifest.splits.items())
    print(f"dataset {out / 'manifest.json'}: {len(manifest.classes)} classes, {sizes}")
    return EXIT_OK


def cmd_train(args):
    manifest = data.DatasetManifest.load(_require(args.data, "data"))
    out = _out_dir(args)
    train_set = manifest.load_split("train")
    val_set = manifest.load_split("val") if "val" in manifest.splits else []
    n = train_set[0].n if train_set else args.points
    cfg = pointnet.ModelConfig(
        num_classes=len(manifest.classes), with_input_tnet=args.tnet, num_points=n,
        point_mlp_widths=args.widths, head_widths=args.head_widths,
    )
    params = pointnet.init(cfg, args.seed)
    tcfg = training.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                                learning_rate=args.lr, momentum=args.momentum, seed=args.seed)
    best, history = training.train(params, train_set, val_set, tcfg)
    model_path = out / "model.pcvm"
    hist_path = out / "history.csv"
    pointnet.save(best, model_path)
    history.write_csv(hist_path)
    best_acc = history.val_acc[history.best_epoch - 1]
    print(f"model {model_path} history {hist_path}: best val acc {best_acc:.4f} at epoch {history.best_epoch}")
    return EXIT_OK


def _sweep(args):
    params = _load_model(args)
    manifest, clouds = _load_val(args)
    if params.config.num_classes != len(manifest.classes):
        raise UsageError(f"model has {params.config.num_classes} classes, dataset has {len(manifest.classes)}")
    rep = verifier.verify(params, clouds, args.epsilons, noise=not args.no_noise,
                          noise_seed=args.seed, absolute_threshold=args.absolute_threshold)
    return params, manifest, clouds, rep


def _tipping_status(rep):
    tip = verifier.tipping_point(rep)
    return ("none" if tip is None else f"{tip:g}"), (EXIT_OK if tip is None else EXIT_TIPPING)


def cmd_verify(args):
    _, _, _, rep = _sweep(args)
    out = _out_dir(args)
    csv_path = out / "sweep.csv"
    rep.write_csv(csv_path)
    paths = [csv_path]
    if len(rep.rows) >= 2:
        paths.append(report.plot_accuracy_curve(rep, out / "accuracy_curve.svg"))
    tip, status = _tipping_status(rep)
    clean = rep.rows[0].i_acc
    print(f"verify: clean acc {clean:.4f}, tipping point {tip}; wrote {' '.join(map(str, paths))}")
    return status


def cmd_attack(args):
    params, manifest, clouds, rep = _sweep(args)
    out = _out_dir(args)
    csv_path = out / "sweep.csv"
    rep.write_csv(csv_path)
    index = verifier.export_adversarial_set(rep.adversarial, out / "adversarial")
    by_id = {c.id: c for c in clouds}
    entries = []
    for eps in args.epsilons:
        hit = next((o for o in rep.adversarial if o.epsilon == eps), None)
        if hit is not None:
            entries.append((eps, by_id[hit.sample_id].points, hit.cloud, hit.i_pred, hit.f_pred))
        elif eps == 0 and clouds:
            c = clouds[0]
            pred = pointnet.predict(params, c.points[None])[0]
            entries.append((eps, c.points, c.points, pred, pred))
    paths = [csv_path, index]
    if entries:
        paths.append(report.render_cloud_gallery(entries, out / "gallery.svg", manifest.classes))
    tip, status = _tipping_status(rep)
    print(f"attack: {len(rep.adversarial)} adversarial samples, tipping point {tip}; "
          f"wrote {' '.join(map(str, paths))}")
    return status


def cmd_reach(args):
    params = _load_model(args)
    _, clouds = _load_val(args)
    if params.config.with_input_tnet:
        raise UsageError("reach requires a model trained without --tnet")
    rows = reach.certify_all(params, clouds, args.epsilons)
    out = _out_dir(args)
    path = out / "certification.csv"
    reach.write_certification_csv(rows, path)
    counts = {v.value: 0 for v in reach.Verdict}
    for _, cert in rows:
        counts[cert.verdict.value] += 1
    summary = ", ".join(f"{k} {v}" for k, v in counts.items())
    print(f"reach: {summary}; wrote {path}")
    return EXIT_OK


def _widths(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad width list {text!r}") from None


def build_parser():
    parser = _Parser(prog="pcv", description="Point-cloud classifier robustness toolkit.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(p):
        p.add_argument("--data", help="dataset directory (with manifest.json)")
        p.add_argument("--model", help="PCVM model file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--points", type=int, default=256, help="points per cloud")
        p.add_argument("--classes", type=int, default=len(data.SHAPE_KINDS))
        p.add_argument("--epsilons", type=parse_epsilons, default=list(DEFAULT_EPSILONS),
                       help="comma-separated ascending grid, e.g. 0,0.05,0.1")
        p.add_argument("--no-noise", action="store_true", help="disable the Gaussian noise stage")
        p.add_argument("--tnet", action="store_true", help="train with the 3x3 input T-Net")
        p.add_argument("--absolute-threshold", action="store_true",
                       help="tipping when perturbed accuracy <= 0.5 instead of <= half the clean accuracy")
        return p

    p = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--jitter", type=float, default=0.02)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--off", help="ModelNet-style directory of OFF meshes to sample instead")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train PointNet-lite"))
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--widths", type=_widths, default=(64, 128, 256))
    p.add_argument("--head-widths", type=_widths, default=(128,))
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("attack", help="sweep epsilons and export the adversarial set"))
    p.set_defaults(func=cmd_attack)
    p = common(sub.add_parser("verify", help="sweep epsilons and report the tipping point"))
    p.set_defaults(func=cmd_verify)
    p = common(sub.add_parser("reach", help="certify samples with interval bounds"))
    p.set_defaults(func=cmd_reach)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except (UsageError, FormatError, ParseError, OSError, ValueError) as exc:
        print(f"pcv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SoundnessError, NumericError, ArithmeticError) as exc:
        print(f"pcv: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

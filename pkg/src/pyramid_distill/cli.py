"""Command-line entry point.

Exit codes: 0 success, 2 bad command line (argparse), 3 configuration or
weights/checkpoint error, 4 dataset error, 5 training failure, 6 metric
undefined, 7 other I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

from . import datasets
from .backbone import PyramidConfig, WeightsArchive, load_teacher
from .config import RunConfig
from .errors import (ConfigError, DatasetError, LoadError, MetricUndefinedError,
                     TrainingError, UsageError)
from .metrics import EvalReport, ablation_table, evaluate_category
from .pipeline import block_label, fit_category
from .scorer import save_map, save_png, score_image
from .trainer import Checkpoint, dump_features
from .visualize import figure_columns

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAINING = 5
EXIT_METRIC = 6
EXIT_IO = 7

_FAILURES = (
    ((ConfigError, LoadError, UsageError), EXIT_CONFIG, "config error"),
    (DatasetError, EXIT_DATA, "data error"),
    (TrainingError, EXIT_TRAINING, "training error"),
    (MetricUndefinedError, EXIT_METRIC, "metric undefined"),
    (OSError, EXIT_IO, "I/O error"),
)


def _int_list(text):
    try:
        return [int(t) for t in text.replace("[", "").replace("]", "").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _float_list(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _resolve(args):
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    train = {}
    for name in ("epochs", "learning_rate", "batch_size", "train_fraction",
                 "val_fraction", "seed", "momentum", "weight_decay", "input_size"):
        train[name] = getattr(args, name, None)
    metrics = {k: getattr(args, k, None) for k in ("fpr_limit", "steps", "fpr_mode",
                                                  "smoothing_sigma")}
    return cfg.with_overrides(
        blocks=getattr(args, "blocks", None), weights=getattr(args, "weights", None),
        categories=getattr(args, "category", None), data_root=getattr(args, "data_root", None),
        teacher=getattr(args, "teacher", None), output=getattr(args, "output", None),
        metrics=metrics, **train,
    )


def _teacher_archive(path):
    if not path:
        raise ConfigError("no teacher archive given (--teacher or teacher.archive)")
    if not Path(path).is_file():
        raise ConfigError(f"teacher archive not found: {path}")
    return WeightsArchive.load(path)


def cmd_train(args):
    cfg = _resolve(args)
    archive = _teacher_archive(cfg.teacher_archive)
    if archive.meta.get("input_size") and int(archive.meta["input_size"]) != cfg.train.input_size:
        if args.input_size is not None:
            raise ConfigError(
                f"--input-size {cfg.train.input_size} conflicts with the teacher's "
                f"{archive.meta['input_size']}"
            )
        cfg = replace(cfg, train=replace(cfg.train, input_size=int(archive.meta["input_size"])))
    teacher = load_teacher(archive, cfg.pyramid)
    categories = cfg.categories or datasets.list_categories(cfg.data_root)
    if not categories:
        raise DatasetError(f"no categories found under {cfg.data_root}")
    out = Path(cfg.output_dir)
    cfg.write(out)
    manifest = {}
    for name in categories:
        cat = datasets.load_category(cfg.data_root, name, cfg.train.input_size)
        cat_dir = out / name
        cat_dir.mkdir(parents=True, exist_ok=True)
        log_path = cat_dir / "train_log.jsonl"
        log_path.unlink(missing_ok=True)
        _, ckpt = fit_category(cat, teacher, cfg.pyramid, cfg.train,
                               checkpoint_dir=cat_dir, log_path=log_path)
        manifest[name] = str((cat_dir / "best.npz").resolve())
        print(f"{name}: best epoch {ckpt.epoch} val_loss {ckpt.val_loss:.6f} -> {manifest[name]}")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return EXIT_OK


def _checkpoints(args):
    paths = list(args.checkpoint or [])
    if args.manifest:
        m = json.loads(Path(args.manifest).read_text())
        paths += [m[k] for k in sorted(m)]
    if not paths:
        raise ConfigError("give --checkpoint or --manifest")
    out = []
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"checkpoint not found: {p}")
        out.append((p, Checkpoint.load(p)))
    return out


def _student_for(ckpt, archive, requested_blocks=None):
    if requested_blocks is not None and tuple(requested_blocks) != ckpt.pyramid.block_ids:
        raise ConfigError(
            f"blocks {list(requested_blocks)} do not match the checkpoint's "
            f"{list(ckpt.pyramid.block_ids)}"
        )
    if archive.fingerprint() != ckpt.teacher_fingerprint:
        raise ConfigError("teacher archive differs from the one the checkpoint was trained with")
    teacher = load_teacher(archive, ckpt.pyramid)
    return teacher, ckpt.student(teacher)


def cmd_eval(args):
    cfg = _resolve(args)
    archive = _teacher_archive(cfg.teacher_archive)
    out = Path(cfg.output_dir)
    cfg.write(out)
    groups = {}
    for path, ckpt in _checkpoints(args):
        teacher, student = _student_for(ckpt, archive, args.blocks)
        name = args.category[0] if args.category and len(args.category) == 1 \
            else ckpt.extra.get("category")
        if not name:
            raise ConfigError(f"{path} records no category; pass --category")
        cat = datasets.load_category(cfg.data_root, name, teacher.input_size)
        report = evaluate_category(
            cat, teacher, student, ckpt.pyramid,
            fpr_limit=cfg.metrics["fpr_limit"], steps=int(cfg.metrics["steps"]),
            fpr_mode=cfg.metrics["fpr_mode"], smoothing_sigma=cfg.metrics["smoothing_sigma"],
        )
        label = block_label(ckpt.pyramid.block_ids)
        frac = ckpt.train_config.get("train_fraction", 1.0)
        key = (label, frac)
        groups[key] = groups.get(key, EvalReport()).merge(report)

    vary_blocks = len({k[0] for k in groups}) > 1
    vary_frac = len({k[1] for k in groups}) > 1
    tables = {}
    for (label, frac), report in groups.items():
        parts = []
        if vary_blocks:
            parts.append(label)
        if vary_frac:
            parts.append(f"{frac:g}")
        key = "@".join(parts) or label
        tag = "report_" + re.sub(r"[^0-9A-Za-z.]+", "-", key).strip("-") if parts else "report"
        report.write(out / f"{tag}.txt")
        (out / f"{tag}.json").write_text(json.dumps(report.to_dict(), indent=2))
        report.write_curves(out / f"{tag}_curves.csv")
        tables[key] = report
        print(report.to_text())
    if len(groups) > 1:
        title = "Blocks" if not vary_frac else "Fraction" if not vary_blocks else "Setting"
        (out / "ablation.txt").write_text(ablation_table(tables, title))
        print(ablation_table(tables, title))
    return EXIT_OK


def _mask_for(image_path, size):
    """Ground-truth mask next to an MVTec-layout test image, if present."""
    p = Path(image_path)
    if p.parent.parent.name == "test" and p.parent.name != datasets.GOOD:
        m = p.parent.parent.parent / "ground_truth" / p.parent.name / f"{p.stem}_mask.png"
        if m.is_file():
            return datasets.read_mask(m, size)
    return None


def _single_checkpoint(args):
    ckpts = _checkpoints(args)
    if len(ckpts) != 1:
        raise ConfigError("this command takes exactly one checkpoint")
    archive = _teacher_archive(args.teacher)
    return _student_for(ckpts[0][1], archive) + (ckpts[0][1],)


def cmd_score(args):
    teacher, student, ckpt = _single_checkpoint(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in args.images:
        img = datasets.read_image(path, teacher.input_size)
        amap, score = score_image(teacher, student, img, ckpt.pyramid,
                                  smoothing_sigma=args.smoothing_sigma,
                                  source_id=Path(path).stem)
        save_map(amap, out)
        rows.append((str(path), Path(path).stem, repr(score)))
        print(f"{path}\t{score:.6f}")
    with open(out / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "source_id", "score"])
        w.writerows(rows)
    return EXIT_OK


def cmd_visualize(args):
    teacher, student, ckpt = _single_checkpoint(args)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    masks = list(args.masks or [])
    if masks and len(masks) != len(args.images):
        raise ConfigError(f"{len(masks)} masks given for {len(args.images)} images")
    written = 0
    for i, path in enumerate(args.images):
        img = datasets.read_image(path, teacher.input_size)
        if masks:
            mask = None if masks[i] == "-" else datasets.read_mask(masks[i], teacher.input_size)
        else:
            mask = _mask_for(path, teacher.input_size)
        stem = Path(path).stem
        for col, (name, rgb) in enumerate(figure_columns(teacher, student, img, ckpt.pyramid, mask)):
            save_png(rgb, out / f"{stem}_{col}_{name}.png", stem)
            written += 1
    print(f"wrote {written} images to {out}")
    return EXIT_OK


def cmd_dump_features(args):
    teacher, student, ckpt = _single_checkpoint(args)
    img = datasets.read_image(args.image, teacher.input_size)
    pyramid = ckpt.pyramid if args.blocks is None else PyramidConfig(tuple(args.blocks))
    path = dump_features(teacher, student, img, pyramid, args.output, Path(args.image).stem)
    print(path)
    return EXIT_OK


def cmd_synth_generate(args):
    spec = datasets.SynthSpec(
        name=args.name, image_size=args.image_size, n_train=args.n_train,
        n_test_good=args.n_test_good, n_test_defect=args.n_test_defect, seed=args.seed,
    )
    cat = datasets.generate_synthetic(spec)
    base = datasets.write_category(cat, args.output)
    print(base)
    return EXIT_OK


def cmd_fetch_teacher(args):
    out = Path(args.output)
    if args.toy or args.toy_noise:
        classes = (datasets.noise_texture_classes if args.toy_noise
                   else datasets.default_texture_classes)(args.image_size, args.seed)
        archive = datasets.pretrain_toy_teacher(classes, epochs=args.epochs, seed=args.seed)
        archive.save(out)
        print(f"{out} (holdout accuracy {archive.meta['pretraining']['holdout_accuracy']:.3f})")
        return EXIT_OK
    try:
        from torchvision.models import ResNet18_Weights, resnet18
    except ImportError as exc:
        raise ConfigError("fetching ImageNet weights needs torchvision installed") from exc
    try:
        model = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1)
    except Exception as exc:  # network failures surface as many exception types
        raise LoadError(f"could not download ResNet-18 weights: {exc}") from exc
    arrays = {k: v.detach().numpy().copy() for k, v in model.state_dict().items()
              if not k.startswith("fc.")}
    meta = {"architecture": "resnet18", "input_size": 256,
            "mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225],
            "source": "torchvision ResNet18_Weights.IMAGENET1K_V1"}
    WeightsArchive(arrays, meta).save(out)
    print(out)
    return EXIT_OK


def _add_run_options(p):
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--data-root", help="dataset root (overrides $PYRAMID_DISTILL_DATA)")
    p.add_argument("--category", action="append", help="category name (repeatable)")
    p.add_argument("--teacher", help="teacher weights archive (.npz)")
    p.add_argument("--output", help="output directory")
    p.add_argument("--blocks", type=_int_list, help="layer groups, e.g. 2,3,4")


def build_parser():
    parser = argparse.ArgumentParser(prog="pyramid-distill", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one student per category")
    _add_run_options(p)
    p.add_argument("--weights", type=_float_list, help="per-level weights")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on their test sets")
    _add_run_options(p)
    p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
    p.add_argument("--manifest", help="manifest.json written by train")
    p.add_argument("--fpr-limit", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--fpr-mode", choices=["pooled", "per_image"])
    p.add_argument("--smoothing-sigma", type=float)
    p.set_defaults(func=cmd_eval)

    for name, func, helptext in (("score", cmd_score, "write anomaly maps and image scores"),
                                 ("visualize", cmd_visualize, "write per-level and fused heatmaps")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", action="append", required=True)
        p.add_argument("--manifest", help=argparse.SUPPRESS)
        p.add_argument("--teacher", required=True)
        p.add_argument("--output", required=True)
        p.add_argument("images", nargs="+")
        if name == "score":
            p.add_argument("--smoothing-sigma", type=float)
        else:
            p.add_argument("--masks", nargs="+", help="mask per image, '-' for none")
        p.set_defaults(func=func)

    p = sub.add_parser("dump-features", help="export per-position unit features of both networks")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--manifest", help=argparse.SUPPRESS)
    p.add_argument("--teacher", required=True)
    p.add_argument("--blocks", type=_int_list)
    p.add_argument("--output", required=True)
    p.add_argument("image")
    p.set_defaults(func=cmd_dump_features)

    p = sub.add_parser("synth-generate", help="write a synthetic category in MVTec layout")
    p.add_argument("--output", required=True, help="dataset root")
    p.add_argument("--name", default="synthetic")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=60)
    p.add_argument("--n-test-good", type=int, default=20)
    p.add_argument("--n-test-defect", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_generate)

    p = sub.add_parser("fetch-teacher", help="download ResNet-18 weights or pretrain a toy teacher")
    p.add_argument("--output", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--toy", action="store_true", help="pretrain on structured synthetic textures")
    g.add_argument("--toy-noise", action="store_true", help="pretrain on structure-free noise classes")
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fetch_teacher)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for types, code, kind in _FAILURES:
            if isinstance(exc, types):
                print(f"pyramid-distill: {kind}: {exc}", file=sys.stderr)
                return code
        raise

if __name__ == "__main__":
    sys.exit(main())

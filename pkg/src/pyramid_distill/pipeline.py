"""Per-category fit/evaluate helpers and the block-set / training-fraction
ablation grids."""
from __future__ import annotations

from dataclasses import replace

from .backbone import PyramidConfig, init_student, load_teacher
from .metrics import EvalReport, evaluate_category
from .trainer import TrainConfig, split_dataset, train

# single blocks, then consecutive compounds
BLOCK_GRID = ((2,), (3,), (4,), (5,), (2, 3), (2, 3, 4), (2, 3, 4, 5))
FRACTION_GRID = (0.05, 0.1, 1.0)


def fit_category(category, teacher, pyramid: PyramidConfig, config: TrainConfig,
                 checkpoint_dir=None, log_path=None):
    """Split the category's training images, train a fresh student, and
    return ``(student, checkpoint)``."""
    train_imgs, val_imgs = split_dataset(
        [s.image for s in category.train], config.val_fraction,
        config.train_fraction, config.seed,
    )
    student = init_student(teacher, config.seed)
    extra = {"category": category.name, "n_train": len(train_imgs), "n_val": len(val_imgs)}
    ckpt = train(teacher, student, train_imgs, val_imgs, config, pyramid,
                 checkpoint_dir=checkpoint_dir, log_path=log_path, extra=extra)
    return student, ckpt


def fit_and_evaluate(category, archive, pyramid, config, **metric_kwargs) -> EvalReport:
    teacher = load_teacher(archive, pyramid)
    student, _ = fit_category(category, teacher, pyramid, config)
    return evaluate_category(category, teacher, student, pyramid, **metric_kwargs)


def block_label(blocks):
    blocks = tuple(blocks)
    return str(blocks[0]) if len(blocks) == 1 else "[" + ", ".join(map(str, blocks)) + "]"


def run_block_ablation(categories, archive, config: TrainConfig, block_sets=BLOCK_GRID,
                       **metric_kwargs):
    """One EvalReport per block set, each averaged over ``categories``."""
    out = {}
    for blocks in block_sets:
        pyramid = PyramidConfig(tuple(blocks))
        report = EvalReport()
        for cat in categories:
            report = report.merge(fit_and_evaluate(cat, archive, pyramid, config, **metric_kwargs))
        out[block_label(blocks)] = report
    return out


def run_fraction_ablation(categories, archive, config: TrainConfig, pyramid=None,
                          fractions=FRACTION_GRID, **metric_kwargs):
    """One EvalReport per training fraction, each averaged over ``categories``."""
    pyramid = pyramid or PyramidConfig()
    out = {}
    for frac in fractions:
        cfg = replace(config, train_fraction=frac)
        report = EvalReport()
        for cat in categories:
            report = report.merge(fit_and_evaluate(cat, archive, pyramid, cfg, **metric_kwargs))
        out[f"{frac:g}"] = report
    return out

"""Image/pixel AUC-ROC and the per-region-overlap (PRO) score."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DimensionError, MetricUndefinedError, UsageError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def roc_auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied positive/negative pairs count one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores for {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUC-ROC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _as_grid(m):
    return np.asarray(getattr(m, "scores", m), dtype=np.float64)


def _pairs(maps, masks):
    maps = [_as_grid(m) for m in maps]
    masks = [np.asarray(m).astype(bool) for m in masks]
    if len(maps) != len(masks):
        raise DimensionError(f"{len(maps)} maps for {len(masks)} masks")
    for i, (a, b) in enumerate(zip(maps, masks)):
        if a.shape != b.shape:
            raise DimensionError(f"map {i} has shape {a.shape}, mask has {b.shape}")
    return maps, masks


def pixel_roc_auc(maps, masks):
    """AUC-ROC over the per-pixel scores pooled across all images."""
    maps, masks = _pairs(maps, masks)
    if not maps:
        raise MetricUndefinedError("no images given")
    return roc_auc(np.concatenate([m.ravel() for m in maps]),
                   np.concatenate([m.ravel() for m in masks]))


def label_components(mask):
    """8-connected labelling; returns (labels, count)."""
    labels, n = ndimage.label(np.asarray(mask).astype(bool), structure=EIGHT_CONNECTED)
    return labels, int(n)


def connected_components(mask):
    """8-connected components of a binary mask, one boolean mask each."""
    labels, n = label_components(mask)
    return [labels == k for k in range(1, n + 1)]


def _thresholds(values, steps):
    if steps < 2:
        raise UsageError("steps must be at least 2")
    # order statistics, so any strictly monotone rescaling of the scores
    # selects the same pixels at every step
    qs = np.quantile(values, np.linspace(0.0, 1.0, steps), method="lower")
    return np.unique(qs)[::-1]


def _count_at_least(sorted_values, thresholds):
    return sorted_values.size - np.searchsorted(sorted_values, thresholds, side="left")


def truncated_trapezoid(x, y, limit):
    """Trapezoidal area under (x, y) from x[0] up to ``limit``.

    ``x`` must be non-decreasing; the curve is cut at ``limit`` by linear
    interpolation between the two samples straddling it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    beyond = np.nonzero(x > limit)[0]
    if beyond.size:
        j = beyond[0]
        if j == 0:
            return 0.0
        x0, x1, y0, y1 = x[j - 1], x[j], y[j - 1], y[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        x = np.append(x[:j], limit)
        y = np.append(y[:j], y_lim)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


@dataclass
class ProCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    pro: np.ndarray


def pro_curve(maps, masks, steps=200, fpr_mode="pooled"):
    """PRO and FPR at ``steps`` score quantiles, highest threshold first.

    The curve starts at (0, 0), the point for a threshold above every score.
    ``fpr_mode`` is "pooled" (normal pixels of the whole set) or "per_image"
    (mean of per-image false-positive rates).
    """
    maps, masks = _pairs(maps, masks)
    pooled = np.concatenate([m.ravel() for m in maps])
    thr = _thresholds(pooled, steps)

    coverage = []
    for grid, mask in zip(maps, masks):
        labels, n = label_components(mask)
        for k in range(1, n + 1):
            comp = np.sort(grid[labels == k])
            coverage.append(_count_at_least(comp, thr) / comp.size)
    if not coverage:
        raise MetricUndefinedError("PRO needs at least one ground-truth anomalous region")
    pro = np.mean(coverage, axis=0)

    if fpr_mode == "pooled":
        normal = np.sort(np.concatenate([g[~m] for g, m in zip(maps, masks)]))
        if normal.size == 0:
            raise MetricUndefinedError("PRO needs ground-truth normal pixels")
        fpr = _count_at_least(normal, thr) / normal.size
    elif fpr_mode == "per_image":
        rates = []
        for g, m in zip(maps, masks):
            normal = np.sort(g[~m])
            if normal.size:
                rates.append(_count_at_least(normal, thr) / normal.size)
        if not rates:
            raise MetricUndefinedError("PRO needs ground-truth normal pixels")
        fpr = np.mean(rates, axis=0)
    else:
        raise UsageError(f"unknown fpr_mode {fpr_mode!r}")

    return ProCurve(np.concatenate([[np.inf], thr]),
                    np.concatenate([[0.0], fpr]),
                    np.concatenate([[0.0], pro]))


def pro_score(maps, masks, fpr_limit=0.3, steps=200, fpr_mode="pooled",
              return_curve=False):
    """Normalized area under the PRO-vs-FPR curve for FPR in [0, fpr_limit]."""
    if not 0.0 < fpr_limit <= 1.0:
        raise UsageError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    curve = pro_curve(maps, masks, steps, fpr_mode)
    score = truncated_trapezoid(curve.fpr, curve.pro, fpr_limit) / fpr_limit
    score = float(np.clip(score, 0.0, 1.0))
    return (score, curve) if return_curve else score


@dataclass
class CategoryResult:
    image_auc: float
    pixel_auc: float
    pro: float
    n_good: int = 0
    n_defective: int = 0
    curve: ProCurve | None = field(default=None, repr=False)


@dataclass
class EvalReport:
    categories: dict = field(default_factory=dict)

    def _mean(self, attr):
        vals = [getattr(r, attr) for r in self.categories.values()]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def image_auc(self):
        return self._mean("image_auc")

    @property
    def pixel_auc(self):
        return self._mean("pixel_auc")

    @property
    def pro(self):
        return self._mean("pro")

    def merge(self, other):
        return EvalReport({**self.categories, **other.categories})

    def to_dict(self):
        return {
            "categories": {
                name: {"image_auc": r.image_auc, "pixel_auc": r.pixel_auc, "pro": r.pro,
                       "n_good": r.n_good, "n_defective": r.n_defective}
                for name, r in self.categories.items()
            },
            "mean": {"image_auc": self.image_auc, "pixel_auc": self.pixel_auc, "pro": self.pro},
        }

    def to_text(self):
        """Two rows per category (PRO, then pixel AUC-ROC) plus image AUC-ROC,
        closed by the unweighted mean."""
        lines = [f"{'Category':<16}{'Metric':<10}{'Value':>8}"]
        rows = list(self.categories.items()) + [("Mean", self)]
        for name, r in rows:
            lines.append(f"{name:<16}{'PRO':<10}{r.pro:>8.3f}")
            lines.append(f"{'':<16}{'AUC-ROC':<10}{r.pixel_auc:>8.3f}")
            lines.append(f"{'':<16}{'AUC-img':<10}{r.image_auc:>8.3f}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        Path(path).write_text(self.to_text())

    def write_curves(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "threshold", "fpr", "pro"])
            for name, r in self.categories.items():
                if r.curve is None:
                    continue
                for t, f, p in zip(r.curve.thresholds, r.curve.fpr, r.curve.pro):
                    w.writerow([name, repr(float(t)), repr(float(f)), repr(float(p))])


def ablation_table(reports, title="Setting"):
    """Rows AR_I / AR_P / PRO, one column per labelled report."""
    labels = [str(k) for k in reports]
    width = max([8] + [len(s) + 2 for s in labels])
    head = f"{title:<8}" + "".join(f"{s:>{width}}" for s in labels)
    out = [head]
    for row, attr in (("AR_I", "image_auc"), ("AR_P", "pixel_auc"), ("PRO", "pro")):
        out.append(f"{row:<8}" + "".join(f"{getattr(r, attr):>{width}.3f}" for r in reports.values()))
    return "\n".join(out) + "\n"


def evaluate_category(category, teacher, student, config, fpr_limit=0.3,
                      steps=200, fpr_mode="pooled", smoothing_sigma=None,
                      batch_size=16) -> EvalReport:
    """Score every test image of a CategorySet and compute the three metrics."""
    from .scorer import score_images

    samples = list(category.test)
    images = [s.image for s in samples]
    masks = [s.mask_or_zeros() for s in samples]
    maps = score_images(teacher, student, images, config, batch_size=batch_size,
                        smoothing_sigma=smoothing_sigma)
    grids = [m.scores for m in maps]
    image_labels = np.array([m.any() for m in masks])
    if image_labels.all() or not image_labels.any():
        raise MetricUndefinedError(
            f"category {category.name!r} needs both defective and defect-free test images"
        )
    image_scores = np.array([g.max() for g in grids])
    pro, curve = pro_score(grids, masks, fpr_limit, steps, fpr_mode, return_curve=True)
    result = CategoryResult(
        image_auc=roc_auc(image_scores, image_labels),
        pixel_auc=pixel_roc_auc(grids, masks),
        pro=pro,
        n_good=int((~image_labels).sum()),
        n_defective=int(image_labels.sum()),
        curve=curve,
    )
    return EvalReport({category.name: result})

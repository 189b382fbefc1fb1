"""Hierarchical feature-matching loss.

Feature maps are channel-first, ``(..., C, H, W)``; any leading dimensions
(typically the batch) are carried through. The reduction order is
normalize -> per-position distance -> spatial mean -> weighted level sum ->
batch mean, and every stage is exposed on its own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DimensionError, NumericError, UsageError

DEFAULT_EPS = 1e-12


def _tensor(x):
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def normalize_positions(fmap, eps=DEFAULT_EPS, check=True):
    """Scale the channel vector at every position to unit length.

    Vectors whose norm is at most ``eps`` become the zero vector. The
    denominator is ``norm + eps`` so the map stays differentiable.
    """
    fmap = _tensor(fmap)
    if fmap.ndim < 3:
        raise DimensionError(f"feature map needs (..., C, H, W) axes, got {tuple(fmap.shape)}")
    if check and not torch.isfinite(fmap).all():
        raise NumericError("feature map contains NaN or Inf")
    norm = torch.linalg.vector_norm(fmap, dim=-3, keepdim=True)
    out = fmap / (norm + eps)
    # written as `norm <= eps` so NaN norms propagate instead of becoming zeros
    return torch.where(norm <= eps, torch.zeros_like(out), out)


def position_loss(f_t, f_s):
    """Half the squared distance of two unit vectors (1 - cosine for unit input)."""
    f_t, f_s = _tensor(f_t), _tensor(f_s)
    if f_t.shape != f_s.shape:
        raise DimensionError(f"vector shapes differ: {tuple(f_t.shape)} vs {tuple(f_s.shape)}")
    return 0.5 * torch.sum((f_t - f_s) ** 2, dim=-1)


def position_losses(F_t, F_s, eps=DEFAULT_EPS, check=True):
    """Per-position loss grid ``(..., H, W)`` of two raw feature maps."""
    F_t, F_s = _tensor(F_t), _tensor(F_s)
    if F_t.shape != F_s.shape:
        raise DimensionError(f"feature map shapes differ: {tuple(F_t.shape)} vs {tuple(F_s.shape)}")
    diff = normalize_positions(F_t, eps, check) - normalize_positions(F_s, eps, check)
    return 0.5 * torch.sum(diff ** 2, dim=-3)


def level_loss(F_t, F_s, eps=DEFAULT_EPS, check=True):
    return position_losses(F_t, F_s, eps, check).mean(dim=(-2, -1))


@dataclass
class LossBreakdown:
    per_level: list
    total: torch.Tensor
    per_position: list | None = None

    def item(self):
        return float(self.total.detach().sum())


def total_loss(pyr_t, pyr_s, config, keep_positions=False, eps=DEFAULT_EPS,
               check=True) -> LossBreakdown:
    """Weighted sum of the level losses of two pyramids.

    ``config`` is a PyramidConfig or a plain sequence of level weights.
    """
    weights = getattr(config, "level_weights", config)
    if not (len(pyr_t) == len(pyr_s) == len(weights)):
        raise ConfigError(
            f"level counts differ: teacher {len(pyr_t)}, student {len(pyr_s)}, "
            f"weights {len(weights)}"
        )
    grids = [position_losses(t, s, eps, check) for t, s in zip(pyr_t, pyr_s)]
    per_level = [g.mean(dim=(-2, -1)) for g in grids]
    total = sum(float(a) * l for a, l in zip(weights, per_level))
    return LossBreakdown(per_level, total, grids if keep_positions else None)


def batch_loss(breakdowns):
    """Mean per-image total over a minibatch.

    Accepts a list of per-image LossBreakdowns, a single breakdown with a
    batch dimension, or a tensor of per-image totals.
    """
    if isinstance(breakdowns, LossBreakdown):
        totals = breakdowns.total.reshape(-1)
    elif torch.is_tensor(breakdowns):
        totals = breakdowns.reshape(-1)
    else:
        breakdowns = list(breakdowns)
        if not breakdowns:
            raise UsageError("batch_loss of an empty batch")
        totals = torch.stack([_tensor(b.total if isinstance(b, LossBreakdown) else b).reshape(())
                              for b in breakdowns])
    if totals.numel() == 0:
        raise UsageError("batch_loss of an empty batch")
    return totals.mean()


def total_loss_grad(pyr_t, pyr_s, weights, eps=DEFAULT_EPS):
    """Closed-form gradient of ``total_loss`` w.r.t. the raw student maps.

    For one position with student vector s, r = |s| and unit teacher t_hat::

        g = s_hat - t_hat
        d/ds = g / (r + eps) - s (s . g) / ((r + eps)^2 r)

    scaled by alpha_l / (H_l W_l). Positions with r <= eps get zero gradient.
    """
    grads = []
    for F_t, F_s, alpha in zip(pyr_t, pyr_s, weights):
        F_t = np.asarray(F_t, np.float64)
        F_s = np.asarray(F_s, np.float64)
        h, w = F_s.shape[-2:]
        r = np.sqrt(np.sum(F_s ** 2, axis=-3, keepdims=True))
        rt = np.sqrt(np.sum(F_t ** 2, axis=-3, keepdims=True))
        t_hat = np.where(rt > eps, F_t / (rt + eps), 0.0)
        live = r > eps
        safe_r = np.where(live, r, 1.0)
        s_hat = np.where(live, F_s / (safe_r + eps), 0.0)
        g = s_hat - t_hat
        sg = np.sum(F_s * g, axis=-3, keepdims=True)
        d = g / (safe_r + eps) - F_s * sg / ((safe_r + eps) ** 2 * safe_r)
        grads.append(np.where(live, d, 0.0) * (alpha / (h * w)))
    return grads

"""Anomaly maps from teacher/student feature discrepancy."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, PngImagePlugin

from .backbone import NetworkHandle, PyramidConfig, check_input, extract_pyramid
from .distill import position_losses
from .errors import DimensionError, UsageError


@dataclass
class AnomalyMap:
    scores: np.ndarray
    source_size: tuple
    per_level: list | None = None
    source_id: str | None = None

    @property
    def image_score(self):
        return float(self.scores.max())


def level_map(F_t, F_s):
    """Per-position loss grid of one level, shape (H_l, W_l) (or batched)."""
    if tuple(F_t.shape) != tuple(F_s.shape):
        raise DimensionError(f"feature map shapes differ: {tuple(F_t.shape)} vs {tuple(F_s.shape)}")
    grid = position_losses(F_t, F_s)
    return grid.detach().cpu().numpy().astype(np.float64)


def _interp_matrix(n_in, n_out):
    # half-pixel centres; source coordinate clamped to the first/last sample
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample(grid, size):
    """Bilinear upsampling of the trailing two axes to ``size`` = (H, W).

    Uses the half-pixel-centre convention (no corner alignment), the same
    one as ``torch.nn.functional.interpolate(..., align_corners=False)``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if np.isscalar(size) or np.ndim(size) == 0:
        size = (int(size), int(size))
    if grid.ndim < 2:
        raise UsageError("upsample needs a 2-D grid")
    h, w = grid.shape[-2:]
    H, W = (int(s) for s in size)
    if H < h or W < w or h < 1 or w < 1:
        raise UsageError(f"cannot upsample {h}x{w} to {H}x{W}")
    return np.einsum("ij,...jk,lk->...il", _interp_matrix(h, H), grid, _interp_matrix(w, W))


def fuse(maps):
    """Element-wise product of equally shaped level maps."""
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise UsageError("fuse needs at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise DimensionError(f"cannot fuse maps of shapes {shape} and {m.shape}")
    out = maps[0].copy()
    for m in maps[1:]:
        out *= m
    return out


def _smooth(grid, sigma):
    from scipy.ndimage import gaussian_filter

    axes = (grid.ndim - 2, grid.ndim - 1)
    return gaussian_filter(grid, sigma=sigma, axes=axes)


def score_batch(teacher: NetworkHandle, student: NetworkHandle, batch,
                config: PyramidConfig, keep_levels=False, smoothing_sigma=None):
    """Fused maps (N, H, W) and optional upsampled level maps for a batch.

    ``batch`` is a normalized NCHW tensor or uint8/float images that are run
    through ``teacher.preprocess`` first.
    """
    if not torch.is_tensor(batch):
        batch = teacher.preprocess(batch)
    check_input(teacher, batch)
    size = tuple(batch.shape[-2:])
    pyr_t = extract_pyramid(teacher, batch, config)
    pyr_s = extract_pyramid(student, batch, config)
    levels = [upsample(level_map(t, s), size) for t, s in zip(pyr_t, pyr_s)]
    fused = fuse(levels)
    if smoothing_sigma:
        fused = _smooth(fused, smoothing_sigma)
    return fused, (levels if keep_levels else None)


def score_image(teacher, student, image, config, keep_levels=False,
                smoothing_sigma=None, source_id=None):
    """Anomaly map of one image and its image-level score (the map maximum)."""
    if torch.is_tensor(image):
        batch = image if image.ndim == 4 else image[None]
    else:
        batch = np.asarray(image)[None]
    fused, levels = score_batch(teacher, student, batch, config, keep_levels, smoothing_sigma)
    if fused.shape[0] != 1:
        raise DimensionError("score_image takes a single image")
    per_level = [lv[0] for lv in levels] if levels is not None else None
    amap = AnomalyMap(fused[0], tuple(fused.shape[1:]), per_level, source_id)
    return amap, amap.image_score


def score_images(teacher, student, images, config, batch_size=16, **kwargs):
    """Score a sequence of uint8 images in batches; returns a list of AnomalyMap."""
    out = []
    images = list(images)
    for start in range(0, len(images), batch_size):
        chunk = np.stack(images[start:start + batch_size])
        fused, levels = score_batch(teacher, student, chunk, config, **kwargs)
        for i in range(fused.shape[0]):
            per_level = [lv[i] for lv in levels] if levels is not None else None
            out.append(AnomalyMap(fused[i], tuple(fused.shape[1:]), per_level))
    return out


def heatmap_rgb(grid, cmap="jet"):
    """8-bit RGB rendering of a grid, min-max scaled per image (display only)."""
    from matplotlib import colormaps

    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    unit = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    rgba = colormaps[cmap](unit)
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def save_png(rgb, path, source_id=None):
    info = PngImagePlugin.PngInfo()
    if source_id is not None:
        info.add_text("source_id", str(source_id))
    Image.fromarray(rgb).save(path, pnginfo=info)


def save_map(amap: AnomalyMap, directory, source_id=None):
    """Write ``<id>_map.npz`` (raw scores) and ``<id>_heatmap.png``."""
    source_id = source_id or amap.source_id or "image"
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid_path = directory / f"{source_id}_map.npz"
    with open(grid_path, "wb") as fh:
        np.savez(fh, scores=amap.scores, source_id=np.array(source_id),
                 source_size=np.array(amap.source_size))
    png_path = directory / f"{source_id}_heatmap.png"
    save_png(heatmap_rgb(amap.scores), png_path, source_id)
    return grid_path, png_path


def load_map(path):
    with np.load(path, allow_pickle=False) as d:
        return AnomalyMap(d["scores"], tuple(int(v) for v in d["source_size"]),
                          source_id=str(d["source_id"]))

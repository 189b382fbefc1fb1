"""Figure-style renderings: ground-truth contour, one heatmap per level,
and the fused heatmap."""
from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

from .scorer import heatmap_rgb, score_image

CONTOUR_RGB = (255, 0, 0)


def contour_overlay(image, mask, color=CONTOUR_RGB):
    """Copy of ``image`` with the mask boundary painted in ``color``."""
    out = np.array(image, dtype=np.uint8, copy=True)
    mask = np.asarray(mask, dtype=bool)
    if out.shape[:2] != mask.shape:
        out = np.asarray(Image.fromarray(out).resize(mask.shape[::-1], Image.BILINEAR))
        out = out.copy()
    edge = mask & ~ndimage.binary_erosion(mask, structure=np.ones((3, 3), bool))
    out[edge] = color
    return out


def figure_columns(teacher, student, image, config, mask=None):
    """List of (name, rgb) panels: contour (only with a mask), per-level
    heatmaps, fused heatmap."""
    amap, _ = score_image(teacher, student, image, config, keep_levels=True)
    panels = []
    if mask is not None:
        panels.append(("contour", contour_overlay(image, mask)))
    for block, level in zip(config.block_ids, amap.per_level):
        panels.append((f"block{block}", heatmap_rgb(level)))
    panels.append(("fused", heatmap_rgb(amap.scores)))
    return panels

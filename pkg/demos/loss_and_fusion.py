"""
Feature matching loss and map fusion
====================================

How one level's per-position loss becomes an upsampled map, and how the
levels combine.
"""
import numpy as np
import torch

from pyramid_distill.distill import level_loss, position_losses, total_loss
from pyramid_distill.scorer import fuse, upsample

rng = np.random.default_rng(1)

# Two feature maps of 8 channels on a 4x4 grid. Only direction matters:
# the student differs from a scaled teacher copy at a single position.
teacher = torch.tensor(rng.normal(size=(8, 4, 4)))
student = 3.0 * teacher.clone()
student[:, 2, 1] = torch.tensor(rng.normal(size=8))

grid = position_losses(teacher, student)
print("per-position loss:\n", grid.numpy().round(3))
print("level loss (spatial mean):", float(level_loss(teacher, student)))

# a second, coarser level that disagrees everywhere a little
coarse_t = torch.tensor(rng.normal(size=(16, 2, 2)))
coarse_s = coarse_t + 0.3 * torch.tensor(rng.normal(size=(16, 2, 2)))
bd = total_loss([teacher, coarse_t], [student, coarse_s], (1.0, 1.0))
print("per level:", [round(float(v), 4) for v in bd.per_level], "total:", round(float(bd.total), 4))

# upsample both grids to the 16x16 image size and multiply
fine = upsample(grid.numpy(), (16, 16))
coarse = upsample(position_losses(coarse_t, coarse_s).numpy(), (16, 16))
fused = fuse([fine, coarse])
r, c = np.unravel_index(np.argmax(fused), fused.shape)
print(f"fused map peaks at ({r}, {c}), inside grid cell ({r // 4}, {c // 4})")

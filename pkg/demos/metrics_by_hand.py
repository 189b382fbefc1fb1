"""
Scoring anomaly maps by hand
============================

Image-level AUC-ROC, pooled pixel AUC-ROC and the per-region overlap
score on a few tiny hand-made maps.
"""
import numpy as np

from pyramid_distill.metrics import connected_components, pixel_roc_auc, pro_score, roc_auc

# image scores: three defect-free images, two defective ones
scores = [0.10, 0.35, 0.20, 0.80, 0.30]
labels = [0, 0, 0, 1, 1]
# 0.30 loses to 0.35 once, so 5 of 6 pairs are ranked correctly
print("image AUC-ROC:", roc_auc(scores, labels))

# one 8x8 image with a large and a small defect
mask = np.zeros((8, 8), bool)
mask[1:5, 1:5] = True   # 16 pixels
mask[6, 6] = True       # 1 pixel
print("regions:", [int(c.sum()) for c in connected_components(mask)])

rng = np.random.default_rng(0)
grid = rng.random((8, 8)) * 0.5
grid[1:5, 1:5] += 0.6   # the big defect is found, the small one is not

print("pixel AUC-ROC:", round(pixel_roc_auc([grid], [mask]), 3))
# pixel AUC barely notices the missed pixel; PRO weights both regions equally
print("PRO (FPR <= 0.3):", round(pro_score([grid], [mask]), 3))

grid[6, 6] = 1.0
print("PRO with the small defect found:", round(pro_score([grid], [mask]), 3))

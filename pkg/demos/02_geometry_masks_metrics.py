"""
Boxes, masks and COCO-style metrics
===================================

IoU, CIoU and NMS on boxes; run-length masks; matching and 101-point AP.
"""

import numpy as np

from noiseseg.evaluation import evaluate
from noiseseg.geometry import BoundingBox, Detection, ciou_loss, iou, nms
from noiseseg.io import format_table
from noiseseg.masks import mask_iou, rle_decode, rle_encode

# %%
# Box overlap and the CIoU regression loss.
a = BoundingBox(0, 0, 10, 10)
b = BoundingBox(5, 0, 15, 10)
print("IoU of half-shifted squares:", iou(a, b))
print("CIoU loss, identical:", ciou_loss(a, a), "shifted:", round(ciou_loss(b, a), 4))

# %%
# Greedy NMS keeps the best of overlapping same-class boxes.
dets = [Detection(a, 0, 0.9), Detection(BoundingBox(1, 0, 11, 10), 0, 0.8), Detection(b, 1, 0.7)]
print("kept after NMS:", [round(d.score, 2) for d in nms(dets, 0.5)])

# %%
# Column-major run-length encoding round trips exactly.
m = np.zeros((6, 8), bool)
m[1:4, 2:7] = True
rle = rle_encode(m, "slide")
print("RLE:", rle.to_string(), "area", rle.area)
assert np.array_equal(rle_decode(rle), m)
shifted = np.roll(m, 1, axis=1)
print("mask IoU with a one-pixel shift:", round(mask_iou(m, shifted), 3))

# %%
# Two images, three ground-truth objects, one miss and one false positive.
gts = [[Detection(BoundingBox(0, 0, 10, 10), 0, 1.0), Detection(BoundingBox(20, 20, 30, 30), 0, 1.0)],
       [Detection(BoundingBox(5, 5, 25, 25), 0, 1.0)]]
preds = [[Detection(BoundingBox(0, 0, 10, 9), 0, 0.9), Detection(BoundingBox(40, 40, 50, 50), 0, 0.6)],
         [Detection(BoundingBox(6, 5, 25, 24), 0, 0.8)]]
report = evaluate(preds, gts, "box", label="demo", test="toy")
print(format_table([report], summary=False))

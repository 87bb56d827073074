"""Box arithmetic, IoU family and greedy non-maximum suppression.

Boxes are corner-form ``(x1, y1, x2, y2)`` in continuous pixel coordinates
throughout. Center-form only appears at file-format boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Callable, Optional, Sequence

import numpy as np
import torch

if TYPE_CHECKING:
    from .masks import InstanceMask

EPS = 1e-7

OSTEOCLAST = 0
NUCLEUS = 1
CLASS_NAMES = {OSTEOCLAST: "osteoclast", NUCLEUS: "nucleus"}


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self.as_tuple()}: corners out of order")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def scale(self, factor: float) -> "BoundingBox":
        return BoundingBox(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def clip(self, width: float, height: float) -> "BoundingBox":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return BoundingBox(x1, y1, x2, y2)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass
class Detection:
    """One detected (or annotated) instance.

    ``class_id`` is 0 for osteoclasts and 1 for nuclei in multiclass mode.
    """

    box: BoundingBox
    class_id: int = OSTEOCLAST
    score: float = 1.0
    mask: Optional["InstanceMask"] = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    def with_(self, **changes) -> "Detection":
        return replace(self, **changes)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes.

    Zero-area boxes give 0 against anything, themselves included.
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` corner-form arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=(union > 0) & (inter > 0))
    return out


def ciou_terms(pred: torch.Tensor, target: torch.Tensor, detach_alpha: bool = True):
    """Complete-IoU between matching rows of two ``(..., 4)`` tensors.

    Returns ``(ciou, iou)``. Widths and heights are clamped to ``EPS`` before
    the arctangent; union and squared enclosing diagonal get ``+EPS``.
    With ``detach_alpha`` the aspect trade-off weight is excluded from
    differentiation.
    """
    px1, py1, px2, py2 = pred.unbind(-1)
    tx1, ty1, tx2, ty2 = target.unbind(-1)
    pw = (px2 - px1).clamp(min=EPS)
    ph = (py2 - py1).clamp(min=EPS)
    tw = (tx2 - tx1).clamp(min=EPS)
    th = (ty2 - ty1).clamp(min=EPS)

    iw = (torch.minimum(px2, tx2) - torch.maximum(px1, tx1)).clamp(min=0)
    ih = (torch.minimum(py2, ty2) - torch.maximum(py1, ty1)).clamp(min=0)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter + EPS
    iou_ = inter / union

    cw = torch.maximum(px2, tx2) - torch.minimum(px1, tx1)
    ch = torch.maximum(py2, ty2) - torch.minimum(py1, ty1)
    c2 = cw**2 + ch**2 + EPS
    rho2 = ((px1 + px2 - tx1 - tx2) ** 2 + (py1 + py2 - ty1 - ty2) ** 2) / 4

    v = (4 / math.pi**2) * (torch.atan(tw / th) - torch.atan(pw / ph)) ** 2
    if detach_alpha:
        with torch.no_grad():
            alpha = v / ((1 - iou_) + v + EPS)
    else:
        alpha = v / ((1 - iou_) + v + EPS)
    return iou_ - rho2 / c2 - alpha * v, iou_


def ciou_loss_tensor(pred: torch.Tensor, target: torch.Tensor, detach_alpha: bool = True) -> torch.Tensor:
    """Element-wise ``1 - CIoU`` for batched corner-form boxes."""
    ciou, _ = ciou_terms(pred, target, detach_alpha=detach_alpha)
    return 1 - ciou


def ciou_loss(pred: BoundingBox, target: BoundingBox) -> float:
    """``1 - CIoU`` of a predicted box against a positive-area target."""
    if target.area <= 0:
        raise ValueError("ciou_loss needs a target with positive area")
    p = torch.tensor(pred.as_tuple(), dtype=torch.float64)
    t = torch.tensor(target.as_tuple(), dtype=torch.float64)
    return float(ciou_loss_tensor(p, t))


def nms(
    dets: Sequence[Detection],
    iou_threshold: float,
    overlap: Optional[Callable[[Detection, Detection], float]] = None,
) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Detections are visited by descending score, equal scores by input
    order. A remaining detection is dropped when its overlap with an already
    kept detection of the same class exceeds ``iou_threshold``. ``overlap``
    defaults to box IoU; stitching passes a mask IoU instead.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    if overlap is None:
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
        keep_idx = _nms_boxes_vectorized(dets, order, iou_threshold)
        return [dets[i] for i in keep_idx]

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or overlap(k, d) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def _nms_boxes_vectorized(dets: Sequence[Detection], order: list[int], thr: float) -> list[int]:
    if not order:
        return []
    boxes = np.array([dets[i].box.as_tuple() for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    ious = box_iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for r in range(len(order)):
        if suppressed[r]:
            continue
        keep.append(order[r])
        hit = (ious[r] > thr) & (classes == classes[r])
        hit[: r + 1] = False
        suppressed |= hit
    return keep

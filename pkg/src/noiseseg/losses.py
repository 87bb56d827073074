"""Training objective: classification BCE, CIoU box loss, distribution focal
loss and prototype-mask BCE, combined as a weighted sum."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .geometry import ciou_loss_tensor
from .masks import crop_region
from .model import (
    Assignment,
    ModelConfig,
    RawOutputs,
    anchor_points,
    assign_targets,
    boxes_to_distances,
    distances_to_boxes,
    expected_distances,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5
    seg: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k}={v} is negative")


@dataclass
class LossBreakdown:
    l_box: torch.Tensor
    l_cls: torch.Tensor
    l_dfl: torch.Tensor
    l_seg: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_box", "l_cls", "l_dfl", "l_seg", "total")}


def cls_loss(logits: torch.Tensor, targets: torch.Tensor, normalizer: Optional[float] = None) -> torch.Tensor:
    """Binary cross-entropy with logits, independently per class channel.

    By default the mean over every location and class. With ``normalizer``
    the summed loss is divided by it instead (the trainer passes the
    positive count).
    """
    bce = F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="none")
    if normalizer is None:
        return bce.mean() if bce.numel() else bce.sum()
    return bce.sum() / max(float(normalizer), 1.0)


def box_loss(pred_boxes: torch.Tensor, target_boxes: torch.Tensor, detach_alpha: bool = True) -> torch.Tensor:
    """Mean ``1 - CIoU`` over positives; 0 without positives."""
    if pred_boxes.shape[0] == 0:
        return pred_boxes.sum() * 0
    return ciou_loss_tensor(pred_boxes, target_boxes, detach_alpha=detach_alpha).mean()


def dfl_loss(dist_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Distribution focal loss.

    ``dist_logits`` is ``(P, 4, R)``; ``targets`` holds continuous side
    distances in bin units. Each target splits its mass between the two
    neighbouring bins in proportion to proximity.
    """
    if dist_logits.shape[0] == 0:
        return dist_logits.sum() * 0
    r = dist_logits.shape[-1]
    hi = r - 1 - 1e-6
    if bool(((targets < 0) | (targets > hi)).any()):
        log.debug("clamping %d DFL targets into [0, %g]", int(((targets < 0) | (targets > hi)).sum()), hi)
    y = targets.clamp(0, hi)
    left = y.floor().long()
    w_right = y - left.to(y.dtype)
    logp = F.log_softmax(dist_logits, -1)
    lp_left = logp.gather(-1, left[..., None])[..., 0]
    lp_right = logp.gather(-1, (left + 1).clamp(max=r - 1)[..., None])[..., 0]
    loss = -((1 - w_right) * lp_left + w_right * lp_right)
    return loss.mean()


def seg_loss(mask_logits: torch.Tensor, target_masks: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Pixel BCE inside each ground-truth box, averaged per instance then over instances.

    All tensors are at prototype resolution; ``boxes`` in prototype pixels.
    """
    if mask_logits.shape[0] == 0:
        return mask_logits.sum() * 0
    n, h, w = mask_logits.shape
    region = crop_region(boxes, h, w).to(mask_logits.dtype)
    empty = region.flatten(1).sum(1) == 0
    if bool(empty.any()):
        # boxes thinner than a prototype pixel: fall back to the pixel under the box centre
        cx = ((boxes[:, 0] + boxes[:, 2]) / 2).clamp(0, w - 1).long()
        cy = ((boxes[:, 1] + boxes[:, 3]) / 2).clamp(0, h - 1).long()
        for i in torch.nonzero(empty).flatten().tolist():
            region[i, cy[i], cx[i]] = 1
    bce = F.binary_cross_entropy_with_logits(mask_logits, target_masks.to(mask_logits.dtype), reduction="none")
    per = (bce * region).flatten(1).sum(1) / region.flatten(1).sum(1)
    return per.mean()


def seg_loss_from_probs(probs: torch.Tensor, target_masks: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Same as :func:`seg_loss` for already-sigmoided masks."""
    p = probs.clamp(1e-12, 1 - 1e-12)
    return seg_loss(torch.log(p) - torch.log1p(-p), target_masks, boxes)


def total_loss(l_box, l_cls, l_dfl, l_seg, weights: LossWeights, detection_only: bool = False) -> LossBreakdown:
    """Weighted sum of the four components; detection mode zeroes the mask term."""
    as_t = lambda v: v if torch.is_tensor(v) else torch.tensor(float(v), dtype=torch.float64)
    l_box, l_cls, l_dfl, l_seg = map(as_t, (l_box, l_cls, l_dfl, l_seg))
    if detection_only:
        l_seg = l_seg * 0
        total = weights.box * l_box + weights.cls * l_cls + weights.dfl * l_dfl
    else:
        total = weights.box * l_box + weights.cls * l_cls + weights.dfl * l_dfl + weights.seg * l_seg
    return LossBreakdown(l_box, l_cls, l_dfl, l_seg, total)


@dataclass
class Targets:
    """Ground truth for one image at model-input resolution."""

    boxes: torch.Tensor  # (n, 4)
    classes: torch.Tensor  # (n,)
    masks: Optional[torch.Tensor] = None  # (n, ph, pw) at prototype resolution, or None


def assign_batch(raw: RawOutputs, targets: Sequence[Targets], config: ModelConfig) -> list[Assignment]:
    cls, dist, _ = raw.flat()
    anchors, strides = anchor_points(config, cls.device, cls.dtype)
    with torch.no_grad():
        boxes = distances_to_boxes(expected_distances(dist), anchors, strides)
        scores = cls.sigmoid()
    return [assign_targets(t.boxes, t.classes, config, scores[b], boxes[b]) for b, t in enumerate(targets)]


def compute_loss(raw: RawOutputs, targets: Sequence[Targets], config: ModelConfig,
                 weights: LossWeights = LossWeights(), detection_only: bool = False,
                 assignments: Optional[list[Assignment]] = None, detach_alpha: bool = True) -> LossBreakdown:
    """Full training objective for a batch.

    Box, DFL and mask terms are means over positive anchors; the
    classification sum is divided by the positive count (at least 1).
    """
    cls, dist, coeff = raw.flat()
    bsz, a_count, nc = cls.shape
    anchors, strides = anchor_points(config, cls.device, cls.dtype)
    if assignments is None:
        assignments = assign_batch(raw, targets, config)

    cls_t = torch.zeros_like(cls)
    pb, tb, pd, td = [], [], [], []
    mlog, mtgt, mbox = [], [], []
    for b, (t, a) in enumerate(zip(targets, assignments)):
        if len(a) == 0:
            continue
        cls_t[b, a.anchors, t.classes[a.gt].long()] = 1.0
        d = dist[b, a.anchors]
        gtb = t.boxes[a.gt].to(cls.dtype)
        pb.append(distances_to_boxes(expected_distances(d), anchors[a.anchors], strides[a.anchors]))
        tb.append(gtb)
        pd.append(d)
        td.append(boxes_to_distances(gtb, anchors[a.anchors], strides[a.anchors]))
        if not detection_only and coeff is not None and t.masks is not None:
            k, ph, pw = raw.protos[b].shape
            mlog.append((coeff[b, a.anchors] @ raw.protos[b].reshape(k, -1)).reshape(-1, ph, pw))
            mtgt.append(t.masks[a.gt])
            mbox.append(gtb * (ph / config.input_size))
    n_pos = sum(len(a) for a in assignments)
    l_cls = cls_loss(cls, cls_t, normalizer=n_pos)
    zero = cls.sum() * 0
    l_box = box_loss(torch.cat(pb), torch.cat(tb), detach_alpha) if pb else zero
    l_dfl = dfl_loss(torch.cat(pd), torch.cat(td)) if pd else zero
    l_seg = seg_loss(torch.cat(mlog), torch.cat(mtgt), torch.cat(mbox)) if mlog else zero
    return total_loss(l_box, l_cls, l_dfl, l_seg, weights, detection_only)

"""Compact anchor-free detector/segmenter.

A small residual CNN with a top-down feature pyramid feeds, at each of the
strides 8/16/32, three heads: per-class logits, ``4 * reg_max`` side-distance
distribution logits and 32 mask coefficients. A prototype head on the
stride-8 map produces 32 prototypes at a quarter of the input resolution.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import BoundingBox, Detection, nms
from .masks import NUM_PROTOTYPES, assemble_mask_probs, rle_encode

CHECKPOINT_FORMAT = "noiseseg-checkpoint"
CHECKPOINT_VERSION = 1
PRIOR_PROB = 0.01


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 416
    strides: tuple[int, ...] = (8, 16, 32)
    reg_max: int = 16
    num_prototypes: int = NUM_PROTOTYPES
    num_classes: int = 1
    base_channels: int = 24
    depth: int = 1
    with_masks: bool = True

    def __post_init__(self):
        if self.input_size % max(self.strides):
            raise ValueError(f"input_size {self.input_size} not divisible by stride {max(self.strides)}")
        if self.reg_max < 2:
            raise ValueError("reg_max must be at least 2")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def proto_size(self) -> int:
        return self.input_size // 4

    def grid_sizes(self) -> list[int]:
        return [self.input_size // s for s in self.strides]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["strides"] = tuple(d["strides"])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


def _conv(cin: int, cout: int, k: int = 3, s: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, s, k // 2, bias=False),
        nn.GroupNorm(min(8, cout), cout),
        nn.SiLU(),
    )


class ResBlock(nn.Module):
    def __init__(self, c: int):
        super().__init__()
        self.a = _conv(c, c)
        self.b = _conv(c, c)

    def forward(self, x):
        return x + self.b(self.a(x))


class Backbone(nn.Module):
    def __init__(self, base: int, depth: int):
        super().__init__()
        chans = [base, base * 2, base * 4, base * 8, base * 8]
        layers = []
        cin = 3
        for c in chans:
            layers.append(nn.Sequential(_conv(cin, c, 3, 2), *[ResBlock(c) for _ in range(depth)]))
            cin = c
        self.stages = nn.ModuleList(layers)
        self.out_channels = chans[2:]

    def forward(self, x):
        feats = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 2:
                feats.append(x)
        return feats  # strides 8, 16, 32


class Neck(nn.Module):
    def __init__(self, in_channels: Sequence[int], c: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(ci, c, 1) for ci in in_channels)
        self.smooth = nn.ModuleList(_conv(c, c) for _ in in_channels)

    def forward(self, feats):
        lat = [l(f) for l, f in zip(self.lateral, feats)]
        out = [None] * len(lat)
        top = lat[-1]
        out[-1] = self.smooth[-1](top)
        for i in range(len(lat) - 2, -1, -1):
            top = lat[i] + F.interpolate(top, size=lat[i].shape[-2:], mode="nearest")
            out[i] = self.smooth[i](top)
        return out


def _head(c: int, cout: int) -> nn.Sequential:
    return nn.Sequential(_conv(c, c), nn.Conv2d(c, cout, 1))


class ProtoHead(nn.Module):
    def __init__(self, c: int, k: int):
        super().__init__()
        self.a = _conv(c, c)
        self.b = _conv(c, c)
        self.out = nn.Conv2d(c, k, 1)

    def forward(self, p3):
        x = self.a(p3)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.out(self.b(x))


@dataclass
class RawOutputs:
    """Per-stride head maps plus prototypes for a batch."""

    class_logits: list[torch.Tensor]
    dist_logits: list[torch.Tensor]
    mask_coeffs: Optional[list[torch.Tensor]]
    protos: Optional[torch.Tensor]
    strides: tuple[int, ...]

    def flat(self):
        """``(B, A, nc)``, ``(B, A, 4, reg_max)``, ``(B, A, k)`` or None."""
        b = self.class_logits[0].shape[0]
        cls = torch.cat([c.flatten(2) for c in self.class_logits], 2).transpose(1, 2)
        dist = torch.cat([d.flatten(2) for d in self.dist_logits], 2).transpose(1, 2)
        dist = dist.reshape(b, dist.shape[1], 4, -1)
        coeff = None
        if self.mask_coeffs is not None:
            coeff = torch.cat([m.flatten(2) for m in self.mask_coeffs], 2).transpose(1, 2)
        return cls, dist, coeff


class SegModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        neck_c = c * 2
        self.backbone = Backbone(c, config.depth)
        self.neck = Neck(self.backbone.out_channels, neck_c)
        self.cls_heads = nn.ModuleList(_head(neck_c, config.num_classes) for _ in config.strides)
        self.box_heads = nn.ModuleList(_head(neck_c, 4 * config.reg_max) for _ in config.strides)
        if config.with_masks:
            self.coeff_heads = nn.ModuleList(_head(neck_c, config.num_prototypes) for _ in config.strides)
            self.proto = ProtoHead(neck_c, config.num_prototypes)
        else:
            self.coeff_heads = None
            self.proto = None
        self.init_head_biases()

    def init_head_biases(self):
        bias = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        for h in self.cls_heads:
            nn.init.constant_(h[-1].bias, bias)
        for h in self.box_heads:
            nn.init.constant_(h[-1].bias, 1.0)

    def forward(self, x: torch.Tensor) -> RawOutputs:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[-2:] != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) input, got {tuple(x.shape)}")
        feats = self.neck(self.backbone(x))
        cls = [h(f) for h, f in zip(self.cls_heads, feats)]
        dist = [h(f) for h, f in zip(self.box_heads, feats)]
        coeff = protos = None
        if self.coeff_heads is not None:
            coeff = [h(f) for h, f in zip(self.coeff_heads, feats)]
            protos = self.proto(feats[0])
        return RawOutputs(cls, dist, coeff, protos, self.config.strides)


def anchor_points(config: ModelConfig, device=None, dtype=torch.float32):
    """Cell centres ``(A, 2)`` in input pixels and per-anchor strides ``(A,)``."""
    pts, strides = [], []
    for s in config.strides:
        n = config.input_size // s
        ys, xs = torch.meshgrid(torch.arange(n, device=device, dtype=dtype),
                                torch.arange(n, device=device, dtype=dtype), indexing="ij")
        pts.append(torch.stack([(xs.flatten() + 0.5) * s, (ys.flatten() + 0.5) * s], 1))
        strides.append(torch.full((n * n,), float(s), device=device, dtype=dtype))
    return torch.cat(pts), torch.cat(strides)


def expected_distances(dist_logits: torch.Tensor) -> torch.Tensor:
    """Distribution expectation in bin units, ``(..., 4, R) -> (..., 4)``."""
    r = dist_logits.shape[-1]
    bins = torch.arange(r, dtype=dist_logits.dtype, device=dist_logits.device)
    return (dist_logits.softmax(-1) * bins).sum(-1)


def distances_to_boxes(d: torch.Tensor, anchors: torch.Tensor, strides: torch.Tensor) -> torch.Tensor:
    """Side distances in bin units ``(..., A, 4)`` (l, t, r, b) to corner boxes."""
    d = d * strides[:, None]
    return torch.cat([anchors - d[..., :2], anchors + d[..., 2:]], -1)


def boxes_to_distances(boxes: torch.Tensor, anchors: torch.Tensor, strides: torch.Tensor) -> torch.Tensor:
    lt = anchors - boxes[..., :2]
    rb = boxes[..., 2:] - anchors
    return torch.cat([lt, rb], -1) / strides[..., None]


@torch.no_grad()
def decode(raw: RawOutputs, config: ModelConfig, score_thresh: float = 0.25, nms_thresh: float = 0.7,
           max_det: int = 300, with_masks: bool = True) -> list[list[Detection]]:
    """Turn raw head outputs into per-image detection lists.

    Each anchor votes for its best class; detections at or above
    ``score_thresh`` go through per-class NMS and, when the model has mask
    heads, get masks assembled from the prototypes at input resolution.
    """
    cls, dist, coeff = raw.flat()
    anchors, strides = anchor_points(config, cls.device, cls.dtype)
    boxes = distances_to_boxes(expected_distances(dist), anchors, strides).clamp(0, config.input_size)
    scores_all = cls.sigmoid()
    out = []
    for b in range(cls.shape[0]):
        score, label = scores_all[b].max(-1)
        keep = torch.nonzero(score >= score_thresh).flatten()
        if keep.numel() > max_det * 3:
            keep = keep[score[keep].argsort(descending=True, stable=True)[: max_det * 3]]
        dets = [Detection(BoundingBox(*map(float, boxes[b, a])), int(label[a]), float(score[a])) for a in keep]
        order = nms(dets, nms_thresh)[:max_det]
        if with_masks and coeff is not None and order:
            idx = {id(d): int(a) for d, a in zip(dets, keep)}
            sel = torch.tensor([idx[id(d)] for d in order], dtype=torch.long)
            probs = assemble_mask_probs(raw.protos[b], coeff[b, sel], boxes[b, sel],
                                        (config.input_size, config.input_size))
            masks = (probs > 0.5).cpu().numpy()
            order = [d.with_(mask=rle_encode(m, "tile")) for d, m in zip(order, masks)]
        out.append(order)
    return out


@dataclass
class Assignment:
    """Positive anchors for one image and the ground truth each one regresses."""

    anchors: torch.Tensor  # (P,) anchor indices
    gt: torch.Tensor  # (P,) ground-truth indices
    alignment: torch.Tensor  # (P,)

    def __len__(self):
        return int(self.anchors.numel())


def assign_targets(gt_boxes: torch.Tensor, gt_classes: torch.Tensor, config: ModelConfig,
                   pred_scores: Optional[torch.Tensor] = None, pred_boxes: Optional[torch.Tensor] = None,
                   topk: int = 10, radius: float = 2.5, alpha: float = 0.5, beta: float = 6.0) -> Assignment:
    """Task-aligned assignment with a centre prior.

    Candidates are anchors whose centres lie inside the ground-truth box and
    within ``radius * stride`` of its centre. Each ground truth takes its
    ``topk`` candidates ranked by ``score**alpha * IoU**beta`` (without
    predictions, by closeness to the centre); an anchor claimed twice stays
    with the higher alignment. A ground truth with no candidate falls back to
    its nearest finest-stride anchor.
    """
    from .geometry import box_iou_matrix

    anchors, strides = anchor_points(config, dtype=torch.float64)
    gt_boxes = torch.as_tensor(gt_boxes, dtype=torch.float64).reshape(-1, 4)
    n, a_count = gt_boxes.shape[0], anchors.shape[0]
    if n == 0:
        e = torch.zeros(0, dtype=torch.long)
        return Assignment(e, e, torch.zeros(0, dtype=torch.float64))
    cx = (gt_boxes[:, 0] + gt_boxes[:, 2]) / 2
    cy = (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2
    ax, ay = anchors[:, 0], anchors[:, 1]
    inside = (ax[None] > gt_boxes[:, 0, None]) & (ax[None] < gt_boxes[:, 2, None]) & \
             (ay[None] > gt_boxes[:, 1, None]) & (ay[None] < gt_boxes[:, 3, None])
    dist = torch.sqrt((ax[None] - cx[:, None]) ** 2 + (ay[None] - cy[:, None]) ** 2)
    cand = inside & (dist <= radius * strides[None])

    if pred_scores is not None and pred_boxes is not None:
        ps = torch.as_tensor(pred_scores, dtype=torch.float64)
        sc = ps[:, torch.as_tensor(gt_classes, dtype=torch.long)].T.clamp(min=0)  # (n, A)
        ious = torch.from_numpy(box_iou_matrix(gt_boxes.numpy(), torch.as_tensor(pred_boxes).double().numpy()))
        align = sc**alpha * ious**beta
    else:
        align = 1.0 / (1.0 + dist / strides[None])
    align = torch.where(cand, align, torch.zeros_like(align))

    owner = torch.full((a_count,), -1, dtype=torch.long)
    best = torch.full((a_count,), -1.0, dtype=torch.float64)
    for g in range(n):
        idx = torch.nonzero(cand[g]).flatten()
        if idx.numel() == 0:
            fine = torch.nonzero(strides == min(config.strides)).flatten()
            idx = fine[torch.argmin(dist[g, fine])].reshape(1)
            val = torch.zeros(1, dtype=torch.float64)
        else:
            # rank by alignment, then closeness, then anchor index
            keys = sorted(range(idx.numel()), key=lambda i: (-float(align[g, idx[i]]), float(dist[g, idx[i]]), int(idx[i])))
            idx = idx[keys[:topk]]
            val = align[g, idx]
        for a, v in zip(idx.tolist(), val.tolist()):
            if v > best[a] or owner[a] < 0:
                owner[a], best[a] = g, v
    pos = torch.nonzero(owner >= 0).flatten()
    return Assignment(pos, owner[pos], best[pos])


def build_model(config: ModelConfig, seed: int = 0) -> SegModel:
    torch.manual_seed(seed)
    return SegModel(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def reconfigure_classes(model: SegModel, num_classes: int, with_masks: Optional[bool] = None,
                        seed: int = 0) -> SegModel:
    """Copy a model into a new class layout.

    Trunk and box heads are copied; the first ``num_classes`` class channels
    are kept (channel 0 is the osteoclast class). Mask heads are copied when
    present in the source and freshly initialized otherwise.
    """
    src = model.config
    if num_classes > src.num_classes:
        raise ValueError(f"cannot grow classes {src.num_classes} -> {num_classes}")
    cfg = src.replace(num_classes=num_classes, with_masks=src.with_masks if with_masks is None else with_masks)
    new = build_model(cfg, seed)
    state = model.state_dict()
    target = new.state_dict()
    for k, v in state.items():
        if k not in target:
            continue
        if k.startswith("cls_heads.") and k.split(".")[2] == "1":
            v = v[:num_classes]
        if target[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(v.shape)} vs {tuple(target[k].shape)}")
        target[k] = v.clone()
    new.load_state_dict(target)
    return new


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(model: SegModel, path, class_map: Optional[dict] = None, seed: Optional[int] = None,
                    extra: Optional[dict] = None) -> None:
    cfg = model.config.to_dict()
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "config_hash": config_hash({"model": cfg, "extra": extra or {}}),
        "seed": seed,
        "class_map": {int(k): v for k, v in (class_map or {}).items()},
        "extra": extra or {},
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
    }, str(path))


def load_checkpoint(path) -> tuple[SegModel, dict]:
    blob = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if int(blob.get("version", 0)) > CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {blob['version']} is newer than supported {CHECKPOINT_VERSION}")
    model = SegModel(ModelConfig.from_dict(blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    meta = {k: v for k, v in blob.items() if k != "state_dict"}
    return model, meta

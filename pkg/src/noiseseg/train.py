"""Training loop, augmentation and batched inference."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .annotations import AnnotationSet
from .evaluation import evaluate
from .geometry import Detection
from .losses import LossWeights, Targets, compute_loss
from .model import ModelConfig, SegModel, decode
from .tiling import ScaleMap, TileGrid, extract_tile, stitch

log = logging.getLogger(__name__)


@dataclass
class Sample:
    """One training patch at model-input resolution."""

    image: np.ndarray  # (S, S, 3) uint8
    ann: AnnotationSet
    source: str = ""


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 10
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 5e-4
    seed: int = 0
    augment: bool = True
    scale_jitter: float = 0.1
    detection_only: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    eval_score_thresh: float = 0.01
    early_stopping: bool = True


@dataclass
class TrainResult:
    model: SegModel
    best_epoch: int
    best_metric: float
    history: list[dict]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def image_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1).float() / 255.0


def _sample_tensors(s: Sample):
    img = image_tensor(s.image)
    boxes = torch.tensor(s.ann.boxes(), dtype=torch.float32).reshape(-1, 4)
    classes = torch.tensor(s.ann.classes(), dtype=torch.long)
    dense = s.ann.dense_masks()
    masks = None if dense is None else torch.from_numpy(dense).float()
    return img, boxes, classes, masks


def _boxes_from_masks(masks: torch.Tensor) -> torch.Tensor:
    n, h, w = masks.shape
    out = torch.zeros((n, 4))
    for i in range(n):
        ys, xs = torch.nonzero(masks[i] > 0.5, as_tuple=True)
        if len(xs):
            out[i] = torch.tensor([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=torch.float32)
    return out


def augment(img, boxes, classes, masks, rng: np.random.Generator, jitter: float = 0.1):
    """Flips and isotropic scale jitter; boxes follow masks where present."""
    _, h, w = img.shape
    s = float(rng.uniform(1 - jitter, 1 + jitter)) if jitter > 0 else 1.0
    flip_h, flip_v = bool(rng.uniform() < 0.5), bool(rng.uniform() < 0.5)
    nh = max(1, int(round(h * s)))
    # random placement offset of the rescaled canvas; draws happen even when unused
    ox = int(rng.integers(0, abs(nh - w) + 1))
    oy = int(rng.integers(0, abs(nh - h) + 1))
    if nh != h:
        img = F.interpolate(img[None], size=(nh, nh), mode="bilinear", align_corners=False)[0]
        if masks is not None and len(masks):
            masks = F.interpolate(masks[None], size=(nh, nh), mode="bilinear", align_corners=False)[0]
        boxes = boxes * (nh / h)
        if nh > h:
            img = img[:, oy:oy + h, ox:ox + w]
            if masks is not None and len(masks):
                masks = masks[:, oy:oy + h, ox:ox + w]
            boxes = boxes - torch.tensor([ox, oy, ox, oy], dtype=boxes.dtype)
        else:
            canvas = torch.zeros((3, h, w))
            canvas[:, oy:oy + nh, ox:ox + nh] = img
            img = canvas
            if masks is not None and len(masks):
                mc = torch.zeros((masks.shape[0], h, w))
                mc[:, oy:oy + nh, ox:ox + nh] = masks
                masks = mc
            boxes = boxes + torch.tensor([ox, oy, ox, oy], dtype=boxes.dtype)
    if flip_h:
        img = img.flip(-1)
        boxes = torch.stack([w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], 1)
        if masks is not None:
            masks = masks.flip(-1)
    if flip_v:
        img = img.flip(-2)
        boxes = torch.stack([boxes[:, 0], h - boxes[:, 3], boxes[:, 2], h - boxes[:, 1]], 1)
        if masks is not None:
            masks = masks.flip(-2)
    orig_area = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).clamp(min=1e-6)
    if masks is not None and len(masks):
        masks = (masks > 0.5).float()
        boxes = _boxes_from_masks(masks)
        keep = masks.flatten(1).sum(1) > 0
    else:
        boxes = torch.stack([boxes[:, 0].clamp(0, w), boxes[:, 1].clamp(0, h),
                             boxes[:, 2].clamp(0, w), boxes[:, 3].clamp(0, h)], 1)
        area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        keep = area >= 0.25 * orig_area
    boxes, classes = boxes[keep], classes[keep]
    if masks is not None:
        masks = masks[keep]
    return img, boxes, classes, masks


def _to_targets(boxes, classes, masks, config: ModelConfig, with_masks: bool) -> Targets:
    pm = None
    if with_masks and masks is not None:
        if len(masks):
            p = config.proto_size
            pm = (F.interpolate(masks[None], size=(p, p), mode="area")[0] >= 0.5).float()
        else:
            pm = torch.zeros((0, config.proto_size, config.proto_size))
    return Targets(boxes.float(), classes.long(), pm)


def make_batch(samples: Sequence[Sample], config: ModelConfig, with_masks: bool,
               rng: Optional[np.random.Generator] = None, jitter: float = 0.1):
    imgs, targets = [], []
    for s in samples:
        img, boxes, classes, masks = _sample_tensors(s)
        if rng is not None:
            img, boxes, classes, masks = augment(img, boxes, classes, masks, rng, jitter)
        imgs.append(img)
        targets.append(_to_targets(boxes, classes, masks, config, with_masks))
    return torch.stack(imgs), targets


@torch.no_grad()
def predict(model: SegModel, images: Sequence[np.ndarray], score_thresh: float = 0.25,
            nms_thresh: float = 0.7, batch_size: int = 16, with_masks: bool = True) -> list[list[Detection]]:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.stack([image_tensor(im) for im in images[i:i + batch_size]])
        out.extend(decode(model(x), model.config, score_thresh, nms_thresh, with_masks=with_masks))
    return out


def predict_slide(model: SegModel, image: np.ndarray, grid: TileGrid, scale: ScaleMap,
                  score_thresh: float = 0.25, nms_thresh: float = 0.7, stitch_iou: float = 0.5,
                  min_area: Optional[int] = 2000, with_masks: bool = True) -> list[Detection]:
    """Tile, predict and stitch one slide."""
    tiles = [extract_tile(image, grid, i, scale) for i in range(len(grid))]
    per_tile = predict(model, tiles, score_thresh, nms_thresh, with_masks=with_masks)
    return stitch(list(enumerate(per_tile)), grid, scale, stitch_iou, min_area)


def validation_map(model: SegModel, samples: Sequence[Sample], criterion: str, classes=None,
                   score_thresh: float = 0.01) -> float:
    preds = predict(model, [s.image for s in samples], score_thresh, with_masks=(criterion == "mask"))
    gts = [s.ann.instances for s in samples]
    return evaluate(preds, gts, criterion, thresholds=(0.5,), classes=classes).map[0.5]


def fit(model: SegModel, train: Sequence[Sample], val: Sequence[Sample], cfg: TrainConfig,
        log_file=None, on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train with AdamW and cosine decay, early-stopping on validation mAP@0.5.

    Validation scores masks for segmentation training and boxes in
    detection-only mode. Without a validation set the final epoch is kept.
    """
    if not train:
        raise ValueError("empty training set")
    seed_everything(cfg.seed)
    config = model.config
    with_masks = config.with_masks and not cfg.detection_only
    criterion = "mask" if with_masks else "box"
    eval_classes = list(range(config.num_classes))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    warmup = min(steps_per_epoch * 2, total_steps // 10 + 1)

    def lr_at(step):
        if step < warmup:
            return cfg.lr * (step + 1) / warmup
        p = (step - warmup) / max(1, total_steps - warmup)
        return cfg.lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * p)))

    rng = np.random.default_rng([cfg.seed, 7919])
    best_metric, best_epoch, best_state = -1.0, -1, None
    history: list[dict] = []
    stale = 0
    fh = open(log_file, "a") if log_file else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(train))
            sums: dict[str, float] = {}
            for i in range(0, len(train), cfg.batch_size):
                batch = [train[j] for j in order[i:i + cfg.batch_size]]
                x, targets = make_batch(batch, config, with_masks, rng if cfg.augment else None, cfg.scale_jitter)
                for g in opt.param_groups:
                    g["lr"] = lr_at(step)
                raw = model(x)
                br = compute_loss(raw, targets, config, cfg.weights, detection_only=not with_masks)
                opt.zero_grad()
                br.total.backward()
                torch.nn.utils.clip_grad_norm_(model.parameters(), 10.0)
                opt.step()
                vals = br.as_floats()
                if fh:
                    fh.write(json.dumps({"epoch": epoch, "step": step, **vals}) + "\n")
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v * len(batch)
                step += 1
            rec = {"epoch": epoch, **{k: v / len(train) for k, v in sums.items()}}
            if val:
                metric = validation_map(model, val, criterion, eval_classes, cfg.eval_score_thresh)
                rec["val_map50"] = metric
                if metric > best_metric:
                    best_metric, best_epoch, stale = metric, epoch, 0
                    best_state = copy.deepcopy(model.state_dict())
                else:
                    stale += 1
            else:
                best_epoch, best_state = epoch, None
            history.append(rec)
            log.info("epoch %d %s", epoch, rec)
            if fh:
                fh.write(json.dumps({"epoch_summary": rec}) + "\n")
            if on_epoch:
                on_epoch(rec)
            if val and cfg.early_stopping and stale >= cfg.patience:
                break
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_epoch, best_metric, history)

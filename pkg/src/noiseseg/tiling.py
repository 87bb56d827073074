"""Overlapping tile plans for large slides, and re-composition into slide coordinates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import cv2
import numpy as np

from .annotations import AnnotationSet
from .geometry import BoundingBox, Detection, iou, nms
from .masks import InstanceMask, mask_to_box, rle_decode, rle_encode

TILE_SIZE = 832
MODEL_SIZE = 416


@dataclass(frozen=True)
class ScaleMap:
    model_size: int = MODEL_SIZE
    tile: int = TILE_SIZE

    @property
    def factor(self) -> float:
        return self.tile / self.model_size


@dataclass(frozen=True)
class TileGrid:
    slide_w: int
    slide_h: int
    tile: int
    stride: int
    origins: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.origins)

    def rect(self, index: int) -> tuple[int, int, int, int]:
        """Tile rectangle clipped to the slide, ``(x1, y1, x2, y2)``."""
        x, y = self.origins[index]
        return x, y, min(x + self.tile, self.slide_w), min(y + self.tile, self.slide_h)

    def to_dict(self) -> dict:
        return {"slide_w": self.slide_w, "slide_h": self.slide_h, "tile": self.tile,
                "stride": self.stride, "origins": [list(o) for o in self.origins]}

    @classmethod
    def from_dict(cls, d: dict) -> "TileGrid":
        return cls(int(d["slide_w"]), int(d["slide_h"]), int(d["tile"]), int(d["stride"]),
                   tuple((int(x), int(y)) for x, y in d["origins"]))


def _axis_origins(n: int, tile: int, stride: int) -> list[int]:
    if n <= tile:
        return [0]
    origins = list(range(0, n - tile + 1, stride))
    if origins[-1] + tile < n:
        origins.append(n - tile)
    return origins


def plan_grid(slide_w: int, slide_h: int, tile: int = TILE_SIZE, overlap: float = 0.5) -> TileGrid:
    """Row-major tile origins at multiples of ``tile * (1 - overlap)``.

    The last tile on each axis is shifted inward to end on the slide edge.
    A slide narrower than one tile gets a single origin at 0 and is padded
    at extraction time.
    """
    if slide_w <= 0 or slide_h <= 0:
        raise ValueError(f"slide dimensions must be positive, got {slide_w}x{slide_h}")
    if tile <= 0 or not 0.0 <= overlap < 1.0:
        raise ValueError(f"bad tile={tile} / overlap={overlap}")
    stride = int(round(tile * (1 - overlap)))
    xs = _axis_origins(slide_w, tile, stride)
    ys = _axis_origins(slide_h, tile, stride)
    return TileGrid(slide_w, slide_h, tile, stride, tuple((x, y) for y in ys for x in xs))


def extract_tile(image: np.ndarray, grid: TileGrid, index: int, scale: Optional[ScaleMap] = None) -> np.ndarray:
    """Crop one tile (zero-padded to full tile size) and downsample to model size."""
    x, y = grid.origins[index]
    crop = image[y:y + grid.tile, x:x + grid.tile]
    if crop.shape[0] != grid.tile or crop.shape[1] != grid.tile:
        padded = np.zeros((grid.tile, grid.tile) + image.shape[2:], dtype=image.dtype)
        padded[:crop.shape[0], :crop.shape[1]] = crop
        crop = padded
    if scale is None or scale.model_size == grid.tile:
        return crop.copy()
    return cv2.resize(crop, (scale.model_size, scale.model_size), interpolation=cv2.INTER_AREA)


def _resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(mask.astype(np.uint8), (size, size), interpolation=cv2.INTER_NEAREST).astype(bool)


def tile_to_slide(det: Detection, origin: Sequence[int], scale: ScaleMap,
                  slide_size: Optional[tuple[int, int]] = None) -> Detection:
    """Map a model-frame detection into slide pixels.

    Boxes are scaled by ``scale.factor`` and shifted by ``origin``. Masks are
    upsampled nearest-neighbour and pasted at ``origin`` on a slide canvas of
    ``slide_size = (width, height)``; mask pixels beyond the slide are dropped.
    """
    f = scale.factor
    ox, oy = origin
    box = det.box.scale(f).translate(ox, oy)
    mask = None
    if det.mask is not None:
        if slide_size is None:
            raise ValueError("slide_size is required to map masks")
        sw, sh = slide_size
        local = rle_decode(det.mask)
        up_size = int(round(local.shape[0] * f))
        up = local if up_size == local.shape[0] else _resize_nearest(local, up_size)
        canvas = np.zeros((sh, sw), dtype=bool)
        h = min(up.shape[0], sh - oy)
        w = min(up.shape[1], sw - ox)
        canvas[oy:oy + h, ox:ox + w] = up[:h, :w]
        mask = rle_encode(canvas, frame="slide")
    if slide_size is not None:
        box = box.clip(*slide_size)
    return Detection(box, det.class_id, det.score, mask)


def slide_to_tile(det: Detection, origin: Sequence[int], scale: ScaleMap) -> Detection:
    """Inverse box mapping of :func:`tile_to_slide` (masks are not carried)."""
    ox, oy = origin
    return Detection(det.box.translate(-ox, -oy).scale(1 / scale.factor), det.class_id, det.score, None)


def clip_annotations(ann: AnnotationSet, grid: TileGrid, index: int,
                     retain_fraction: float = 0.25) -> AnnotationSet:
    """Training labels for one tile, in tile-local slide-resolution pixels.

    Masks are intersected with the tile; an instance survives when its
    visible fraction is at least ``retain_fraction`` and its box is recomputed
    from the clipped mask. Box-only instances use box area fractions.
    """
    x1, y1, x2, y2 = grid.rect(index)
    tile_rect = BoundingBox(x1, y1, x2, y2)
    out = AnnotationSet(grid.tile, grid.tile)
    for inst in ann.instances:
        if inst.mask is not None:
            full = rle_decode(inst.mask)
            total = int(full.sum())
            if total == 0:
                continue
            part = full[y1:y2, x1:x2]
            visible = int(part.sum())
            if visible == 0 or visible / total < retain_fraction:
                continue
            local = np.zeros((grid.tile, grid.tile), dtype=bool)
            local[:part.shape[0], :part.shape[1]] = part
            out.instances.append(Detection(mask_to_box(local), inst.class_id, inst.score,
                                           rle_encode(local, frame="tile")))
        else:
            b = inst.box
            if b.area <= 0:
                continue
            cb = b.clip(x2, y2)
            cb = BoundingBox(max(cb.x1, x1), max(cb.y1, y1), max(cb.x2, x1), max(cb.y2, y1))
            if cb.area / b.area < retain_fraction:
                continue
            out.instances.append(Detection(cb.translate(-x1, -y1), inst.class_id, inst.score, None))
    out.points = [(px - x1, py - y1) for px, py in ann.points if x1 <= px < x2 and y1 <= py < y2]
    return out


def scale_annotations(ann: AnnotationSet, size: int) -> AnnotationSet:
    """Resample a tile-frame annotation set to a square model canvas."""
    f = size / ann.width
    out = AnnotationSet(size, size, points=[(x * f, y * f) for x, y in ann.points])
    for inst in ann.instances:
        if inst.mask is None:
            out.instances.append(Detection(inst.box.scale(f), inst.class_id, inst.score, None))
            continue
        small = cv2.resize(rle_decode(inst.mask).astype(np.float32), (size, size),
                           interpolation=cv2.INTER_AREA) >= 0.5
        box = mask_to_box(small)
        if box is None:
            continue
        out.instances.append(Detection(box, inst.class_id, inst.score, rle_encode(small, "tile")))
    return out


class _MaskCache:
    def __init__(self, dets: Sequence[Detection]):
        self._dense = {}
        self._dets = dets

    def dense(self, d: Detection) -> np.ndarray:
        key = id(d)
        if key not in self._dense:
            self._dense[key] = rle_decode(d.mask)
        return self._dense[key]

    def overlap(self, a: Detection, b: Detection) -> float:
        if a.mask is None or b.mask is None:
            return iou(a.box, b.box)
        ix1 = int(np.floor(max(a.box.x1, b.box.x1)))
        iy1 = int(np.floor(max(a.box.y1, b.box.y1)))
        ix2 = int(np.ceil(min(a.box.x2, b.box.x2)))
        iy2 = int(np.ceil(min(a.box.y2, b.box.y2)))
        if ix2 <= ix1 or iy2 <= iy1:
            return 0.0
        inter = np.count_nonzero(self.dense(a)[iy1:iy2, ix1:ix2] & self.dense(b)[iy1:iy2, ix1:ix2])
        union = a.mask.area + b.mask.area - inter
        return inter / union if union > 0 else 0.0


def mask_nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class NMS scored by mask IoU (box IoU for mask-less detections)."""
    cache = _MaskCache(dets)
    return nms(dets, iou_threshold, overlap=cache.overlap)


def stitch(per_tile: Iterable[tuple[int, Sequence[Detection]]], grid: TileGrid, scale: ScaleMap,
           iou_threshold: float = 0.5, min_area: Optional[int] = 2000) -> list[Detection]:
    """Merge per-tile detections into one duplicate-free slide-level list.

    Detections are mapped to slide pixels, deduplicated across tiles by
    mask-IoU NMS and, when ``min_area`` is set, instances whose mask covers
    fewer slide pixels are dropped.
    """
    size = (grid.slide_w, grid.slide_h)
    mapped = []
    for index, dets in per_tile:
        origin = grid.origins[index]
        mapped.extend(tile_to_slide(d, origin, scale, size) for d in dets)
    kept = mask_nms(mapped, iou_threshold)
    if min_area is not None:
        kept = [d for d in kept if d.mask is None or d.mask.area >= min_area]
    return kept

"""Binary instance masks.

RLE convention (bit-exact, used in every result file):

* pixels are scanned column-major (down the first column, then the next),
* ``counts`` alternate background/foreground runs and always start with a
  background run, which may be 0,
* no other run is 0, so the encoding of a mask is unique,
* ``sum(counts) == width * height``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import BoundingBox

log = logging.getLogger(__name__)

NUM_PROTOTYPES = 32


class MalformedRLE(ValueError):
    pass


@dataclass(frozen=True)
class InstanceMask:
    width: int
    height: int
    counts: tuple[int, ...]
    frame: str = "tile"

    def __post_init__(self):
        if sum(self.counts) != self.width * self.height:
            raise MalformedRLE(
                f"run lengths sum to {sum(self.counts)}, expected {self.width}x{self.height}"
            )
        if any(c < 0 for c in self.counts):
            raise MalformedRLE("negative run length")
        if self.frame not in ("tile", "slide"):
            raise ValueError(f"unknown frame {self.frame!r}")

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    @property
    def empty(self) -> bool:
        return self.area == 0

    def decode(self) -> np.ndarray:
        return rle_decode(self)

    def to_string(self) -> str:
        return " ".join(str(c) for c in self.counts)

    @classmethod
    def from_string(cls, s: str, width: int, height: int, frame: str = "tile") -> "InstanceMask":
        try:
            counts = tuple(int(tok) for tok in s.split())
        except ValueError as exc:
            raise MalformedRLE(f"non-integer run length in {s[:40]!r}") from exc
        return cls(width, height, counts, frame)


def rle_encode(mask: np.ndarray, frame: str = "tile") -> InstanceMask:
    """Encode a dense ``(height, width)`` mask canonically."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    pixels = mask.astype(bool).T.ravel()
    if pixels.size == 0:
        return InstanceMask(w, h, (), frame)
    change = np.flatnonzero(pixels[1:] != pixels[:-1]) + 1
    bounds = np.concatenate([[0], change, [pixels.size]])
    runs = np.diff(bounds).tolist()
    if pixels[0]:
        runs.insert(0, 0)
    return InstanceMask(w, h, tuple(int(r) for r in runs), frame)


def rle_decode(m: InstanceMask) -> np.ndarray:
    counts = np.asarray(m.counts, dtype=np.int64)
    if counts.sum() != m.width * m.height:
        raise MalformedRLE("run-length sum mismatch")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape(m.width, m.height).T.copy()


def mask_to_box(mask: np.ndarray) -> BoundingBox | None:
    """Tight box around the foreground pixels, or None for an empty mask."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return BoundingBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def box_region(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Boolean map of pixels whose centers fall in ``[x1, x2) x [y1, y2)``."""
    xc = np.arange(width) + 0.5
    yc = np.arange(height) + 0.5
    inx = (xc >= box.x1) & (xc < box.x2)
    iny = (yc >= box.y1) & (yc < box.y2)
    return iny[:, None] & inx[None, :]


def mask_iou(a: Union[InstanceMask, np.ndarray], b: Union[InstanceMask, np.ndarray]) -> float:
    """Pixel IoU; two empty masks give 0."""
    da = a.decode() if isinstance(a, InstanceMask) else np.asarray(a, dtype=bool)
    db = b.decode() if isinstance(b, InstanceMask) else np.asarray(b, dtype=bool)
    if da.shape != db.shape:
        raise ValueError(f"mask shapes differ: {da.shape} vs {db.shape}")
    union = np.count_nonzero(da | db)
    if union == 0:
        return 0.0
    return np.count_nonzero(da & db) / union


def mask_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between stacks of dense masks ``(n, H, W)`` and ``(m, H, W)``."""
    a = np.asarray(a, dtype=bool).reshape(len(a), -1)
    b = np.asarray(b, dtype=bool).reshape(len(b), -1)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    fa = a.astype(np.float32)
    fb = b.astype(np.float32)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    out = np.zeros_like(inter, dtype=np.float64)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def polygon_to_mask(vertices: Sequence[Sequence[float]], width: int, height: int,
                    frame: str = "tile") -> InstanceMask:
    """Even-odd rasterization sampling at pixel centers."""
    return rle_encode(polygon_to_dense(vertices, width, height), frame)


def polygon_to_dense(vertices: Sequence[Sequence[float]], width: int, height: int) -> np.ndarray:
    out = np.zeros((height, width), dtype=bool)
    pts = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 3:
        return out
    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    xc = np.arange(width) + 0.5
    ylo = max(int(np.floor(pts[:, 1].min())), 0)
    yhi = min(int(np.ceil(pts[:, 1].max())), height)
    for y in range(ylo, yhi):
        yc = y + 0.5
        # half-open rule on edge endpoints so shared vertices count once
        crosses = (y0 <= yc) != (y1 <= yc)
        if not crosses.any():
            continue
        t = (yc - y0[crosses]) / (y1[crosses] - y0[crosses])
        xs = np.sort(x0[crosses] + t * (x1[crosses] - x0[crosses]))
        inside = np.searchsorted(xs, xc, side="right") % 2 == 1
        out[y] = inside
    return out


def assemble_mask_probs(protos: torch.Tensor, coeffs: torch.Tensor, boxes: torch.Tensor,
                        out_size: tuple[int, int]) -> torch.Tensor:
    """Batched prototype mask assembly, returning cropped probabilities.

    protos ``(k, ph, pw)``, coeffs ``(n, k)``, boxes ``(n, 4)`` in output pixel
    coordinates. Returns ``(n, H, W)`` sigmoid maps zeroed outside each box.
    """
    k, ph, pw = protos.shape
    n = coeffs.shape[0]
    h, w = out_size
    if n == 0:
        return protos.new_zeros((0, h, w))
    logits = (coeffs @ protos.reshape(k, -1)).reshape(n, 1, ph, pw)
    probs = torch.sigmoid(logits)
    probs = F.interpolate(probs, size=(h, w), mode="bilinear", align_corners=False)[:, 0]
    return probs * crop_region(boxes, h, w).to(probs.dtype)


def crop_region(boxes: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """``(n, h, w)`` boolean maps of pixel centers inside each box."""
    xc = torch.arange(w, dtype=boxes.dtype, device=boxes.device) + 0.5
    yc = torch.arange(h, dtype=boxes.dtype, device=boxes.device) + 0.5
    x1, y1, x2, y2 = (boxes[:, i, None] for i in range(4))
    inx = (xc[None] >= x1) & (xc[None] < x2)
    iny = (yc[None] >= y1) & (yc[None] < y2)
    return iny[:, :, None] & inx[:, None, :]


def assemble_mask(protos, coeffs, box: BoundingBox, out_size) -> InstanceMask:
    """Combine prototypes with one detection's coefficients into a binary mask.

    Sigmoid of the weighted sum, bilinear upsampling to ``out_size``, crop to
    ``box`` and a strict ``> 0.5`` threshold. A box entirely off the canvas
    yields an empty mask.
    """
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    protos = torch.as_tensor(np.asarray(protos), dtype=torch.float64)
    coeffs = torch.as_tensor(np.asarray(coeffs), dtype=torch.float64).reshape(1, -1)
    if coeffs.shape[1] != protos.shape[0]:
        raise ValueError(f"{coeffs.shape[1]} coefficients for {protos.shape[0]} prototypes")
    b = torch.tensor([box.as_tuple()], dtype=torch.float64)
    probs = assemble_mask_probs(protos, coeffs, b, out_size)[0]
    m = rle_encode((probs > 0.5).numpy(), frame="tile")
    h, w = out_size
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= w or box.y1 >= h:
        log.debug("box %s lies outside the %dx%d canvas; mask is empty", box.as_tuple(), w, h)
    return m

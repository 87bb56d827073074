"""Nuclei-aware osteoclast instance segmentation at desk scale.

Submodules: :mod:`geometry` (boxes, IoU, CIoU, NMS), :mod:`masks` (RLE and
prototype masks), :mod:`tiling`, :mod:`model`, :mod:`losses`, :mod:`train`,
:mod:`pipeline` (nuclei pretraining chain and experiment arms),
:mod:`evaluation`, :mod:`synth` (synthetic slides) and :mod:`io`.
"""

from .geometry import NUCLEUS, OSTEOCLAST, BoundingBox, Detection, ciou_loss, iou, nms
from .masks import InstanceMask, rle_decode, rle_encode

__version__ = "0.1.0"

__all__ = [
    "BoundingBox", "Detection", "InstanceMask", "NUCLEUS", "OSTEOCLAST",
    "ciou_loss", "iou", "nms", "rle_decode", "rle_encode",
]

"""Ground-truth containers shared by the generator, tiler, trainer and file IO."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import NUCLEUS, OSTEOCLAST, BoundingBox, Detection
from .masks import InstanceMask, mask_to_box, rle_encode


@dataclass
class AnnotationSet:
    """Instances (box + optional mask + class) and weak nuclei points for one image.

    Box-only instances carry ``mask=None``; these are the weak or pseudo
    nuclei labels used during detection pretraining.
    """

    width: int
    height: int
    instances: list[Detection] = field(default_factory=list)
    points: list[tuple[float, float]] = field(default_factory=list)

    def of_class(self, class_id: int) -> list[Detection]:
        return [d for d in self.instances if d.class_id == class_id]

    @property
    def osteoclasts(self) -> list[Detection]:
        return self.of_class(OSTEOCLAST)

    @property
    def nuclei(self) -> list[Detection]:
        return self.of_class(NUCLEUS)

    def boxes(self) -> np.ndarray:
        return np.array([d.box.as_tuple() for d in self.instances], dtype=np.float64).reshape(-1, 4)

    def classes(self) -> np.ndarray:
        return np.array([d.class_id for d in self.instances], dtype=np.int64)

    def dense_masks(self) -> Optional[np.ndarray]:
        if not self.instances or any(d.mask is None for d in self.instances):
            return None
        return np.stack([d.mask.decode() for d in self.instances])

    def copy(self) -> "AnnotationSet":
        return AnnotationSet(self.width, self.height, list(self.instances), list(self.points))


def instance_from_mask(mask: np.ndarray, class_id: int = OSTEOCLAST, frame: str = "tile",
                       score: float = 1.0) -> Optional[Detection]:
    box = mask_to_box(mask)
    if box is None:
        return None
    return Detection(box, class_id, score, rle_encode(mask, frame))


def box_instance(box: BoundingBox, class_id: int = NUCLEUS, score: float = 1.0) -> Detection:
    return Detection(box, class_id, score, None)

"""Greedy single-class non-maximum suppression."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .geometry import Box, boxes_to_array, pairwise_iou


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValidationError(f"detection score must lie in [0, 1], got {self.score}")


def nms_indices(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Indices of kept rows, highest score first; equal scores keep input order."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"NMS threshold must lie in (0, 1), got {threshold}")
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -np.asarray(scores, dtype=np.float64)))
    ious = pairwise_iou(boxes[order], boxes[order])
    alive = np.ones(n, dtype=bool)
    keep = []
    for k in range(n):
        if not alive[k]:
            continue
        keep.append(order[k])
        alive[k + 1:] &= ious[k, k + 1:] <= threshold
    return np.asarray(keep, dtype=np.int64)


def greedy_nms(dets: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep the best remaining detection, drop everything overlapping it by more than ``threshold``."""
    if not dets:
        if not 0.0 < threshold < 1.0:
            raise ValidationError(f"NMS threshold must lie in (0, 1), got {threshold}")
        return []
    boxes = boxes_to_array(d.box for d in dets)
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, threshold)]

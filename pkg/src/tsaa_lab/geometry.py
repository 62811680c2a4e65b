"""Axis-aligned boxes and IoU.

Boxes are stored as center + extent ``(cx, cy, w, h)``; corner form is
derived. Scalar helpers work on :class:`Box` values, the ``*_array``
helpers on ``(N, 4)`` float arrays in the same ``cxcywh`` layout and are
what the assigners, metrics and trainer use internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError, ValidationError


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"box has non-finite field: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box extents must be positive, got w={self.w}, h={self.h}")
        x1, y1, x2, y2 = self.corners
        if not (x1 < x2 and y1 < y2):
            raise ValidationError(f"box collapses in corner form: {vals}")

    @property
    def corners(self) -> tuple[float, float, float, float]:
        hw, hh = self.w / 2.0, self.h / 2.0
        return (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


@dataclass(frozen=True)
class IouMatrix:
    """Pairwise IoU of two box lists; ``values[i, j] = iou(first[i], second[j])``."""

    values: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, idx):
        return self.values[idx]


def to_corners(b: Box) -> tuple[float, float, float, float]:
    return b.corners


def from_corners(x1: float, y1: float, x2: float, y2: float) -> Box:
    if not (x1 < x2 and y1 < y2):
        raise ValidationError(f"degenerate corners ({x1}, {y1}, {x2}, {y2})")
    return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def iou_matrix(first: Sequence[Box], second: Sequence[Box]) -> IouMatrix:
    if len(first) == 0 or len(second) == 0:
        raise EmptyInputError("iou_matrix needs two non-empty box lists")
    return IouMatrix(pairwise_iou(boxes_to_array(first), boxes_to_array(second)))


# -- array helpers -----------------------------------------------------------


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(*map(float, row)) for row in np.asarray(arr, dtype=np.float64)]


def corners_array(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    half = arr[..., 2:] / 2.0
    return np.concatenate([arr[..., :2] - half, arr[..., :2] + half], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between every row of ``a`` (N, 4) and ``b`` (M, 4), both cxcywh."""
    ca = corners_array(a)
    cb = corners_array(b)
    iw = np.minimum(ca[:, None, 2], cb[None, :, 2]) - np.maximum(ca[:, None, 0], cb[None, :, 0])
    ih = np.minimum(ca[:, None, 3], cb[None, :, 3]) - np.maximum(ca[:, None, 1], cb[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.minimum(inter / union, 1.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU of two aligned (N, 4) cxcywh arrays."""
    ca = corners_array(a)
    cb = corners_array(b)
    iw = np.minimum(ca[:, 2], cb[:, 2]) - np.maximum(ca[:, 0], cb[:, 0])
    ih = np.minimum(ca[:, 3], cb[:, 3]) - np.maximum(ca[:, 1], cb[:, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.minimum(inter / union, 1.0)

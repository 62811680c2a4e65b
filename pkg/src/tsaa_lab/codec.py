"""Offset codecs: prediction offsets <-> scene boxes.

Linear codec (RetinaNet / Faster R-CNN)::

    x = tx * w_a + x_a      w = exp(tw) * w_a

Sigmoid codec (YOLOv3). Centers are computed in cell units relative to the
top-left corner of the anchor's cell and then scaled by the stride, so the
decoded center always lies inside that cell::

    x = (sigmoid(tx) + x0 / s) * s     w = exp(tw) * w_a

``cell_origin`` is passed in scene units; with stride 1 cell units and scene
units coincide.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericRangeError, ValidationError
from .geometry import Box

# Beyond this exp() already exceeds any meaningful scene extent.
MAX_LOG_SCALE = 50.0
# Encoded sigmoid targets must sit at least this far (cell units) inside the cell.
CELL_EPS = 1e-6


class CodecKind(str, enum.Enum):
    LINEAR = "linear"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class OffsetVector:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self) -> None:
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValidationError(f"offsets must be finite, got {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)

    @classmethod
    def zero(cls) -> "OffsetVector":
        return cls(0.0, 0.0, 0.0, 0.0)


def _check_scale(tw: float, th: float) -> None:
    if not (abs(tw) <= MAX_LOG_SCALE and abs(th) <= MAX_LOG_SCALE):
        raise NumericRangeError(f"log-scale offsets ({tw}, {th}) exceed +/-{MAX_LOG_SCALE}")


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def decode_linear(anchor: Box, off: OffsetVector) -> Box:
    _check_scale(off.tw, off.th)
    return Box(off.tx * anchor.w + anchor.cx,
               off.ty * anchor.h + anchor.cy,
               math.exp(off.tw) * anchor.w,
               math.exp(off.th) * anchor.h)


def encode_linear(anchor: Box, target: Box) -> OffsetVector:
    return OffsetVector((target.cx - anchor.cx) / anchor.w,
                        (target.cy - anchor.cy) / anchor.h,
                        math.log(target.w / anchor.w),
                        math.log(target.h / anchor.h))


def decode_sigmoid(cell_origin: tuple[float, float], anchor: Box, off: OffsetVector,
                   stride: float = 1.0) -> Box:
    _check_scale(off.tw, off.th)
    x0, y0 = cell_origin
    cx = (_sigmoid(off.tx) + x0 / stride) * stride
    cy = (_sigmoid(off.ty) + y0 / stride) * stride
    return Box(cx, cy, math.exp(off.tw) * anchor.w, math.exp(off.th) * anchor.h)


def encode_sigmoid(cell_origin: tuple[float, float], anchor: Box, target: Box,
                   stride: float = 1.0) -> OffsetVector:
    x0, y0 = cell_origin
    fx = (target.cx - x0) / stride
    fy = (target.cy - y0) / stride
    if not (CELL_EPS < fx < 1.0 - CELL_EPS and CELL_EPS < fy < 1.0 - CELL_EPS):
        raise DomainError(
            f"target center ({target.cx}, {target.cy}) is not strictly inside the cell "
            f"at {cell_origin} with stride {stride}")
    return OffsetVector(math.log(fx / (1.0 - fx)),
                        math.log(fy / (1.0 - fy)),
                        math.log(target.w / anchor.w),
                        math.log(target.h / anchor.h))


# -- vectorised forms ---------------------------------------------------------


def _check_scale_array(off: np.ndarray) -> None:
    scale = off[:, 2:4]
    if not np.all(np.isfinite(off)) or np.any(np.abs(scale) > MAX_LOG_SCALE):
        raise NumericRangeError(f"offsets out of range (|tw|, |th| must be <= {MAX_LOG_SCALE})")


def decode_linear_array(anchors: np.ndarray, off: np.ndarray) -> np.ndarray:
    off = np.asarray(off, dtype=np.float64).reshape(-1, 4)
    _check_scale_array(off)
    out = np.empty_like(off)
    out[:, 0] = off[:, 0] * anchors[:, 2] + anchors[:, 0]
    out[:, 1] = off[:, 1] * anchors[:, 3] + anchors[:, 1]
    out[:, 2] = np.exp(off[:, 2]) * anchors[:, 2]
    out[:, 3] = np.exp(off[:, 3]) * anchors[:, 3]
    return out


def encode_linear_array(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    out = np.empty_like(targets, dtype=np.float64)
    out[:, 0] = (targets[:, 0] - anchors[:, 0]) / anchors[:, 2]
    out[:, 1] = (targets[:, 1] - anchors[:, 1]) / anchors[:, 3]
    out[:, 2] = np.log(targets[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(targets[:, 3] / anchors[:, 3])
    return out


def decode_sigmoid_array(origins: np.ndarray, strides: np.ndarray, anchors: np.ndarray,
                         off: np.ndarray) -> np.ndarray:
    off = np.asarray(off, dtype=np.float64).reshape(-1, 4)
    _check_scale_array(off)
    out = np.empty_like(off)
    sig = 0.5 * (1.0 + np.tanh(0.5 * off[:, :2]))
    out[:, 0] = (sig[:, 0] + origins[:, 0] / strides) * strides
    out[:, 1] = (sig[:, 1] + origins[:, 1] / strides) * strides
    out[:, 2] = np.exp(off[:, 2]) * anchors[:, 2]
    out[:, 3] = np.exp(off[:, 3]) * anchors[:, 3]
    return out


def encode_sigmoid_array(origins: np.ndarray, strides: np.ndarray, anchors: np.ndarray,
                         targets: np.ndarray) -> np.ndarray:
    frac = (targets[:, :2] - origins) / strides[:, None]
    inside = (frac > CELL_EPS) & (frac < 1.0 - CELL_EPS)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside.all(axis=1))[0])
        raise DomainError(f"target center {tuple(targets[bad, :2])} is outside the cell of row {bad}")
    out = np.empty_like(targets, dtype=np.float64)
    out[:, :2] = np.log(frac / (1.0 - frac))
    out[:, 2] = np.log(targets[:, 2] / anchors[:, 2])
    out[:, 3] = np.log(targets[:, 3] / anchors[:, 3])
    return out

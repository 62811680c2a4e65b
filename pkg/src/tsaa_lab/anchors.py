"""Anchor generation.

Two layouts are supported: RetinaNet-style tiling over a feature pyramid
(:func:`generate_grid_anchors`) and YOLO-style per-cell priors
(:func:`generate_prior_anchors`). Anchors are never clipped to the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Box, array_to_boxes, boxes_to_array

# Documented default, not a measured value: three octave scales per level.
DEFAULT_SCALES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))
# H:W ratio bank used for the pedestrian-like scenes.
CROWD_RATIOS = (1.0, 2.0, 3.0)


@dataclass(frozen=True)
class AnchorGridSpec:
    image_w: float
    image_h: float
    strides: tuple[float, ...]
    scales_per_level: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = CROWD_RATIOS

    def __post_init__(self) -> None:
        object.__setattr__(self, "strides", tuple(float(s) for s in self.strides))
        object.__setattr__(self, "scales_per_level", tuple(float(s) for s in self.scales_per_level))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if not self.strides or not self.scales_per_level or not self.ratios:
            raise ConfigError("anchor grid needs at least one stride, scale and ratio")
        if self.image_w <= 0 or self.image_h <= 0:
            raise ConfigError("image extents must be positive")
        for name in ("strides", "scales_per_level", "ratios"):
            if any(not (v > 0 and math.isfinite(v)) for v in getattr(self, name)):
                raise ConfigError(f"all {name} must be strictly positive")
        for s in self.strides:
            if self.image_w / s < 1 or self.image_h / s < 1:
                raise ConfigError(f"stride {s} yields no cell on a {self.image_w}x{self.image_h} image")


@dataclass(frozen=True)
class PriorGridSpec:
    grid_w: int
    grid_h: int
    stride: float
    priors: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "priors", tuple((float(w), float(h)) for w, h in self.priors))
        if self.grid_w < 1 or self.grid_h < 1:
            raise ConfigError("prior grid needs at least one cell")
        if not self.stride > 0:
            raise ConfigError("stride must be positive")
        if not self.priors:
            raise ConfigError("at least one prior is required")
        if any(not (w > 0 and h > 0) for w, h in self.priors):
            raise ConfigError("priors must have positive extents")


@dataclass
class AnchorSet:
    """Anchor boxes plus the metadata of the grid cell that owns each one.

    ``cell_origin`` holds the top-left corner of the owning cell in scene
    units and ``stride_of`` the cell size; both are ``None`` for anchor sets
    built from bare boxes (tests, hand-made fixtures).
    """

    boxes: list[Box]
    cell_origin: Optional[list[tuple[float, float]]] = None
    stride_of: Optional[list[float]] = None
    array: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.boxes)
        if (self.cell_origin is None) != (self.stride_of is None):
            raise ContractError("cell_origin and stride_of must be given together")
        if self.cell_origin is not None and not (len(self.cell_origin) == len(self.stride_of) == n):
            raise ContractError("boxes, cell_origin and stride_of must have equal length")
        self.array = boxes_to_array(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def has_cells(self) -> bool:
        return self.cell_origin is not None

    def origin_array(self) -> np.ndarray:
        if self.cell_origin is None:
            raise ContractError("anchor set carries no cell metadata")
        return np.asarray(self.cell_origin, dtype=np.float64).reshape(-1, 2)

    def stride_array(self) -> np.ndarray:
        if self.stride_of is None:
            raise ContractError("anchor set carries no cell metadata")
        return np.asarray(self.stride_of, dtype=np.float64)

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box]) -> "AnchorSet":
        return cls(list(boxes))

    @classmethod
    def from_arrays(cls, boxes: np.ndarray, origins: Optional[np.ndarray] = None,
                    strides: Optional[np.ndarray] = None) -> "AnchorSet":
        cell_origin = None if origins is None else [(float(x), float(y)) for x, y in origins]
        stride_of = None if strides is None else [float(s) for s in strides]
        return cls(array_to_boxes(boxes), cell_origin, stride_of)


def generate_grid_anchors(spec: AnchorGridSpec) -> AnchorSet:
    """Tile anchors level-major, then row-major cells, then ratio, then scale.

    At stride ``s`` and scale ``k`` the anchor side is ``k * s``; a ratio
    ``r = H/W`` keeps that area with ``w = k*s / sqrt(r)``, ``h = k*s * sqrt(r)``.
    """
    rows, origins, strides = [], [], []
    for stride in spec.strides:
        cells_w = math.ceil(spec.image_w / stride)
        cells_h = math.ceil(spec.image_h / stride)
        shapes = []
        for r in spec.ratios:
            for k in spec.scales_per_level:
                side = k * stride
                shapes.append((side / math.sqrt(r), side * math.sqrt(r)))
        for cy in range(cells_h):
            for cx in range(cells_w):
                x0, y0 = cx * stride, cy * stride
                for w, h in shapes:
                    rows.append((x0 + stride / 2.0, y0 + stride / 2.0, w, h))
                    origins.append((x0, y0))
                    strides.append(stride)
    return AnchorSet.from_arrays(np.array(rows), np.array(origins), np.array(strides))


def generate_prior_anchors(grid_w: int, grid_h: int, stride: float,
                           priors: Sequence[tuple[float, float]]) -> AnchorSet:
    spec = PriorGridSpec(grid_w, grid_h, stride, tuple(priors))
    return generate_from_spec(spec)


def generate_from_spec(spec: AnchorGridSpec | PriorGridSpec) -> AnchorSet:
    if isinstance(spec, AnchorGridSpec):
        return generate_grid_anchors(spec)
    rows, origins = [], []
    for cy in range(spec.grid_h):
        for cx in range(spec.grid_w):
            x0, y0 = cx * spec.stride, cy * spec.stride
            for w, h in spec.priors:
                rows.append((x0 + spec.stride / 2.0, y0 + spec.stride / 2.0, w, h))
                origins.append((x0, y0))
    strides = np.full(len(rows), float(spec.stride))
    return AnchorSet.from_arrays(np.array(rows), np.array(origins), strides)


def expected_count(spec: AnchorGridSpec | PriorGridSpec) -> int:
    if isinstance(spec, PriorGridSpec):
        return spec.grid_w * spec.grid_h * len(spec.priors)
    per_cell = len(spec.scales_per_level) * len(spec.ratios)
    return sum(math.ceil(spec.image_w / s) * math.ceil(spec.image_h / s) * per_cell
               for s in spec.strides)

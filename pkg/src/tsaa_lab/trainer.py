"""A toy detection head that exhibits anchor drift.

Each anchor sees a small patch of the scene's occupancy raster (the
fraction of every raster cell covered by some object) plus its own
geometry. One affine map, shared by every anchor of every scene, turns
those features into four offsets and an objectness logit. Because the
parameters are shared, anchors that look alike must regress alike, which
is exactly what a fixed max-IoU assignment violates in crowds.

Training is full-batch gradient descent on smooth-L1 (positives) plus
binary cross-entropy (all non-ignored anchors).
"""

from __future__ import annotations

import csv
import enum
import io
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .anchors import AnchorGridSpec, AnchorSet, PriorGridSpec, generate_from_spec
from .assignment import (AssignerConfig, AssignmentLabeling, FirstStage, PositivityRule,
                         build_target_array, decode_offsets, first_stage, second_stage)
from .codec import CodecKind, OffsetVector
from .errors import ConfigError, ContractError
from .geometry import paired_iou
from .scenes import Scene

log = logging.getLogger(__name__)

GEOMETRY_FEATURES = 4


class AssignmentMode(str, enum.Enum):
    FIXED_BASELINE = "baseline"
    TSAA = "tsaa"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    learning_rate: float = 0.02
    smooth_l1_beta: float = 1.0
    assignment_mode: AssignmentMode = AssignmentMode.FIXED_BASELINE
    codec_kind: CodecKind = CodecKind.LINEAR
    seed: int = 0
    patch_radius: int = 2
    grid_res: int = 16
    reassign_every: int = 1  # epochs between TSAA reassignments

    def __post_init__(self) -> None:
        object.__setattr__(self, "assignment_mode", AssignmentMode(self.assignment_mode))
        object.__setattr__(self, "codec_kind", CodecKind(self.codec_kind))
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.smooth_l1_beta > 0:
            raise ConfigError("smooth_l1_beta must be positive")
        if self.patch_radius < 0:
            raise ConfigError("patch_radius must be >= 0")
        if self.grid_res < 8:
            raise ConfigError("grid_res must be >= 8")
        if self.reassign_every < 1:
            raise ConfigError("reassign_every must be >= 1")

    @property
    def feature_dim(self) -> int:
        return feature_dim(self.patch_radius)


@dataclass
class RegressorParams:
    weights: np.ndarray  # (feature_dim, 5)
    bias: np.ndarray  # (5,)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[1] != 5 or self.bias.shape != (5,):
            raise ContractError(f"bad parameter shapes {self.weights.shape}, {self.bias.shape}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractError("parameters must be finite")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "RegressorParams":
        return cls(np.zeros((dim, 5)), np.zeros(5))

    @classmethod
    def initial(cls, dim: int, seed: int) -> "RegressorParams":
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, 0.01, size=(dim, 5)), np.zeros(5))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, vec: np.ndarray, dim: int) -> "RegressorParams":
        return cls(vec[: dim * 5].reshape(dim, 5), vec[dim * 5:])

    def to_json_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias.tolist()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "RegressorParams":
        return cls(np.array(data["weights"], dtype=np.float64), np.array(data["bias"], dtype=np.float64))


@dataclass
class TrainLog:
    mean_mitp: list[float] = field(default_factory=list)
    regression_loss: list[float] = field(default_factory=list)
    classification_loss: list[float] = field(default_factory=list)
    reassignment_count: list[int] = field(default_factory=list)
    # per epoch, per scene labelings; only filled when train(record_assignments=True)
    assignments: list[list[AssignmentLabeling]] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.mean_mitp)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_mitp", "reg_loss", "cls_loss", "reassignments"])
        for e in range(len(self)):
            w.writerow([e + 1, repr(self.mean_mitp[e]), repr(self.regression_loss[e]),
                        repr(self.classification_loss[e]), self.reassignment_count[e]])
        return buf.getvalue()


# -- features -----------------------------------------------------------------


@dataclass(frozen=True)
class OccupancyGrid:
    values: np.ndarray  # (grid_res, grid_res), row = y
    scene_w: float
    scene_h: float

    @property
    def res(self) -> int:
        return self.values.shape[0]


def rasterize_occupancy(scene: Scene, grid_res: int) -> OccupancyGrid:
    """Exact fraction of each raster cell covered by the union of the scene's boxes."""
    if grid_res < 8:
        raise ConfigError("grid_res must be >= 8")
    W, H = scene.scene_w, scene.scene_h
    corners = np.array([b.corners for b in scene.gt_boxes])
    xs = np.unique(np.clip(np.concatenate([np.linspace(0, W, grid_res + 1), corners[:, 0], corners[:, 2]]), 0, W))
    ys = np.unique(np.clip(np.concatenate([np.linspace(0, H, grid_res + 1), corners[:, 1], corners[:, 3]]), 0, H))
    mx = (xs[:-1] + xs[1:]) / 2
    my = (ys[:-1] + ys[1:]) / 2
    inside_x = (mx[None, :] > corners[:, 0:1]) & (mx[None, :] < corners[:, 2:3])  # (K, nx)
    inside_y = (my[None, :] > corners[:, 1:2]) & (my[None, :] < corners[:, 3:4])  # (K, ny)
    covered = np.einsum("ky,kx->yx", inside_y.astype(np.int32), inside_x.astype(np.int32)) > 0
    area = np.outer(np.diff(ys), np.diff(xs)) * covered
    col = np.minimum((mx / (W / grid_res)).astype(int), grid_res - 1)
    row = np.minimum((my / (H / grid_res)).astype(int), grid_res - 1)
    grid = np.zeros((grid_res, grid_res))
    np.add.at(grid, (row[:, None], col[None, :]), area)
    grid /= (W / grid_res) * (H / grid_res)
    return OccupancyGrid(np.clip(grid, 0.0, 1.0), W, H)


def feature_dim(patch_radius: int) -> int:
    return (2 * patch_radius + 1) ** 2 + GEOMETRY_FEATURES


def feature_matrix(anchors: AnchorSet, grid: OccupancyGrid, patch_radius: int) -> np.ndarray:
    """Features of every anchor: occupancy patch (row-major, zero padded), then cx/W, cy/H, log w, log h."""
    r = patch_radius
    res = grid.res
    padded = np.pad(grid.values, r)
    a = anchors.array
    col = np.floor(a[:, 0] / (grid.scene_w / res)).astype(int)
    row = np.floor(a[:, 1] / (grid.scene_h / res)).astype(int)
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    rr = row[:, None] + dy.ravel()[None, :]
    cc = col[:, None] + dx.ravel()[None, :]
    valid = (rr >= 0) & (rr < res) & (cc >= 0) & (cc < res)
    patch = np.where(valid, padded[np.clip(rr + r, 0, res + 2 * r - 1), np.clip(cc + r, 0, res + 2 * r - 1)], 0.0)
    geom = np.column_stack([a[:, 0] / grid.scene_w, a[:, 1] / grid.scene_h, np.log(a[:, 2]), np.log(a[:, 3])])
    return np.concatenate([patch, geom], axis=1)


def extract_features(anchor_index: int, anchors: AnchorSet, grid: OccupancyGrid,
                     patch_radius: int = 2) -> np.ndarray:
    return feature_matrix(AnchorSet.from_arrays(anchors.array[anchor_index:anchor_index + 1]),
                          grid, patch_radius)[0]


# -- model ----------------------------------------------------------------------


def forward(params: RegressorParams, features: np.ndarray):
    """Affine head. A single feature vector gives ``(OffsetVector, logit)``;
    a ``(N, D)`` matrix gives ``((N, 4) offsets, (N,) logits)``."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != params.feature_dim:
        raise ContractError(f"feature dimension {x.shape[-1]} != parameter dimension {params.feature_dim}")
    out = x @ params.weights + params.bias
    if x.ndim == 1:
        return OffsetVector(*map(float, out[:4])), float(out[4])
    return out[:, :4], out[:, 4]


def smooth_l1(x: np.ndarray, beta: float) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def _smooth_l1_grad(x: np.ndarray, beta: float) -> np.ndarray:
    return np.where(np.abs(x) < beta, x / beta, np.sign(x))


def loss_terms(params: RegressorParams, features: np.ndarray, labels: np.ndarray,
               target_offsets: np.ndarray, beta: float = 1.0):
    """Returns ``(regression_loss, classification_loss, gradient)``.

    ``labels`` is 1 for positives and 0 for negatives; ignored anchors must
    already be dropped. ``target_offsets`` rows are read for positives only.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    out = x @ params.weights + params.bias
    d_out = np.zeros_like(out)
    pos = labels > 0.5
    n_pos = int(pos.sum())
    if n_pos:
        resid = out[pos, :4] - target_offsets[pos]
        reg = float(smooth_l1(resid, beta).sum() / n_pos)
        d_out[pos, :4] = _smooth_l1_grad(resid, beta) / n_pos
    else:
        log.warning("no positive anchors in batch; regression term is zero")
        reg = 0.0
    n = len(labels)
    if n:
        z = out[:, 4]
        cls = float(np.mean(np.logaddexp(0.0, z) - labels * z))
        d_out[:, 4] = (0.5 * (1.0 + np.tanh(0.5 * z)) - labels) / n
    else:
        cls = 0.0
    return reg, cls, RegressorParams(x.T @ d_out, d_out.sum(axis=0))


def loss_and_grad(params: RegressorParams, features: np.ndarray, labels: np.ndarray,
                  target_offsets: np.ndarray, beta: float = 1.0):
    reg, cls, grad = loss_terms(params, features, labels, target_offsets, beta)
    return reg + cls, grad


# -- training -------------------------------------------------------------------


@dataclass
class _SceneData:
    targets: np.ndarray
    features: np.ndarray
    first: FirstStage
    labeling: AssignmentLabeling


def check_consistency(anchors: AnchorSet, assigner_cfg: AssignerConfig, codec_kind: CodecKind) -> None:
    if CodecKind(codec_kind) is CodecKind.SIGMOID:
        if not anchors.has_cells:
            raise ContractError("the sigmoid codec needs anchors with cell metadata")
        if assigner_cfg.rule is not PositivityRule.YOLO:
            raise ContractError("the sigmoid codec needs the YOLO positivity rule "
                                "(targets must lie inside the anchor's cell)")


def _prepare(scenes: Sequence[Scene], anchors: AnchorSet, assigner_cfg: AssignerConfig,
             cfg: TrainConfig) -> list[_SceneData]:
    data = []
    for s in scenes:
        t = s.array
        grid = rasterize_occupancy(s, cfg.grid_res)
        first = first_stage(anchors, t, assigner_cfg)
        data.append(_SceneData(t, feature_matrix(anchors, grid, cfg.patch_radius), first, first.labeling))
    return data


def train(scenes: Sequence[Scene], anchors_spec: AnchorGridSpec | PriorGridSpec | AnchorSet,
          assigner_cfg: AssignerConfig, train_cfg: TrainConfig,
          record_assignments: bool = False) -> tuple[RegressorParams, TrainLog]:
    if not scenes:
        raise ContractError("train needs at least one scene")
    anchors = anchors_spec if isinstance(anchors_spec, AnchorSet) else generate_from_spec(anchors_spec)
    check_consistency(anchors, assigner_cfg, train_cfg.codec_kind)
    data = _prepare(scenes, anchors, assigner_cfg, train_cfg)
    L = len(anchors)
    x_all = np.concatenate([d.features for d in data])
    params = RegressorParams.initial(train_cfg.feature_dim, train_cfg.seed)
    tsaa = train_cfg.assignment_mode is AssignmentMode.TSAA
    trace = TrainLog()

    for epoch in range(train_cfg.epochs):
        offsets, _ = forward(params, x_all)
        labels = np.zeros(len(x_all))
        keep = np.ones(len(x_all), dtype=bool)
        tgt = np.zeros((len(x_all), 4))
        mitps, moved = [], 0
        for k, d in enumerate(data):
            rows = slice(k * L, (k + 1) * L)
            pred = decode_offsets(anchors, offsets[rows], train_cfg.codec_kind)
            if tsaa and epoch % train_cfg.reassign_every == 0:
                d.labeling = second_stage(d.first, pred, d.targets, assigner_cfg)
                adaptive = d.first.adaptive
                moved += int(np.sum(d.labeling.target[adaptive] != d.first.labeling.target[adaptive]))
            lab = d.labeling
            idx, enc = build_target_array(lab, anchors, d.targets, train_cfg.codec_kind)
            base = k * L
            labels[base + idx] = 1.0
            tgt[base + idx] = enc
            keep[base:base + L] = lab.target >= -1
            mitps.append(float(np.min(paired_iou(pred[idx], d.targets[lab.target[idx]]))))
        reg, cls, grad = loss_terms(params, x_all[keep], labels[keep], tgt[keep], train_cfg.smooth_l1_beta)
        trace.mean_mitp.append(float(np.mean(mitps)))
        trace.regression_loss.append(reg)
        trace.classification_loss.append(cls)
        trace.reassignment_count.append(moved)
        if record_assignments:
            trace.assignments.append([d.labeling for d in data])
        params = RegressorParams(params.weights - train_cfg.learning_rate * grad.weights,
                                 params.bias - train_cfg.learning_rate * grad.bias)
    return params, trace


# -- inference ------------------------------------------------------------------


@dataclass
class TrainedModel:
    """Parameters plus everything needed to rebuild features and decode."""

    params: RegressorParams
    anchors_spec: AnchorGridSpec | PriorGridSpec
    codec_kind: CodecKind
    patch_radius: int
    grid_res: int

    def anchors(self) -> AnchorSet:
        return generate_from_spec(self.anchors_spec)

    def predict(self, scene: Scene, anchors: Optional[AnchorSet] = None) -> tuple[np.ndarray, np.ndarray]:
        """Decoded boxes and objectness scores for every anchor of ``scene``."""
        anchors = anchors or self.anchors()
        feats = feature_matrix(anchors, rasterize_occupancy(scene, self.grid_res), self.patch_radius)
        off, logit = forward(self.params, feats)
        boxes = decode_offsets(anchors, off, self.codec_kind)
        return boxes, 0.5 * (1.0 + np.tanh(0.5 * logit))

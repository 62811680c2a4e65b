"""Anchor-to-object assignment.

Baseline assignment labels every anchor from its own IoU with the objects
(positive / negative / ignore) and then lets each object claim its best
anchor (low-quality matching) so no object goes without a positive.

Two-stage anchor assignment (TSAA) keeps that first-stage judgment and the
low-quality pairs fixed, but re-decides *which* object each remaining
positive anchor regresses to, using the box its current prediction decodes
to. With zero offsets the two coincide.

Labels are stored as an integer array: ``>= 0`` is the assigned target
index, :data:`NEGATIVE` and :data:`IGNORE` mark the other two verdicts.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .anchors import AnchorSet
from .codec import (CELL_EPS, CodecKind, OffsetVector, decode_linear_array,
                    decode_sigmoid_array, encode_linear_array, encode_sigmoid_array)
from .errors import ConfigError, ContractError, EmptyInputError, InfeasibleError
from .geometry import Box, boxes_to_array, pairwise_iou

NEGATIVE = -1
IGNORE = -2


class Provenance(enum.IntEnum):
    NONE = -1
    LOW_QUALITY = 0
    STAGE1 = 1
    STAGE2_ADAPTIVE = 2


_PROVENANCE_NAMES = {
    Provenance.LOW_QUALITY: "low_quality",
    Provenance.STAGE1: "stage1",
    Provenance.STAGE2_ADAPTIVE: "stage2_adaptive",
}


class Mode(str, enum.Enum):
    ONE_STAGE = "one_stage"
    TWO_STAGE = "two_stage"


class PositivityRule(str, enum.Enum):
    MAX_IOU = "max_iou"
    YOLO = "yolo"


@dataclass(frozen=True)
class AssignerConfig:
    """Thresholds and mode for both assigners.

    ``nt_pos`` / ``nt_neg`` bound the ignore band of one-stage detectors.
    In ``TWO_STAGE`` mode proposals are positive iff their IoU reaches
    ``nt_proposal`` and negative otherwise (no ignore band), and the
    second-stage score adds the anchor IoU to the prediction IoU.
    ``rule=YOLO`` replaces the IoU judgment by the ratio/cell test of
    :func:`yolo_positive_mask`; ``yolo_ratio_condition=False`` falls back to
    the original YOLOv3 test (center in cell and IoU >= ``nt_pos``).
    """

    nt_pos: float = 0.5
    nt_neg: float = 0.4
    nt_proposal: float = 0.5
    r_t: float = 4.0
    mode: Mode = Mode.ONE_STAGE
    rule: PositivityRule = PositivityRule.MAX_IOU
    yolo_ratio_condition: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "rule", PositivityRule(self.rule))
        if not (0.0 <= self.nt_neg <= self.nt_pos <= 1.0):
            raise ConfigError(f"need 0 <= nt_neg <= nt_pos <= 1, got {self.nt_neg}, {self.nt_pos}")
        if not (0.0 <= self.nt_proposal <= 1.0):
            raise ConfigError(f"nt_proposal must lie in [0, 1], got {self.nt_proposal}")
        if not self.r_t >= 1.0:
            raise ConfigError(f"r_t must be >= 1, got {self.r_t}")

    @property
    def positive_threshold(self) -> float:
        return self.nt_proposal if self.mode is Mode.TWO_STAGE else self.nt_pos

    @property
    def negative_threshold(self) -> float:
        return self.nt_proposal if self.mode is Mode.TWO_STAGE else self.nt_neg

    @classmethod
    def retinanet(cls) -> "AssignerConfig":
        return cls(nt_pos=0.5, nt_neg=0.4)

    @classmethod
    def faster_rcnn_rpn(cls) -> "AssignerConfig":
        return cls(nt_pos=0.7, nt_neg=0.3)

    @classmethod
    def faster_rcnn_rcnn(cls) -> "AssignerConfig":
        return cls(nt_pos=0.7, nt_neg=0.3, nt_proposal=0.5, mode=Mode.TWO_STAGE)

    @classmethod
    def yolo(cls) -> "AssignerConfig":
        return cls(r_t=4.0, rule=PositivityRule.YOLO)


@dataclass(frozen=True)
class AnchorStatus:
    kind: str  # "positive" | "negative" | "ignore"
    target: Optional[int] = None
    provenance: Optional[Provenance] = None


@dataclass
class AssignmentLabeling:
    target: np.ndarray
    provenance: np.ndarray
    target_count: int

    def __post_init__(self) -> None:
        self.target = np.asarray(self.target, dtype=np.int64)
        self.provenance = np.asarray(self.provenance, dtype=np.int64)
        if self.target.shape != self.provenance.shape:
            raise ContractError("target and provenance arrays must align")
        if np.any(self.target >= self.target_count):
            raise ContractError("positive entry points past the target list")

    @property
    def anchor_count(self) -> int:
        return int(self.target.shape[0])

    @property
    def positive(self) -> np.ndarray:
        return self.target >= 0

    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.target >= 0)

    def status(self, i: int) -> AnchorStatus:
        t = int(self.target[i])
        if t == NEGATIVE:
            return AnchorStatus("negative")
        if t == IGNORE:
            return AnchorStatus("ignore")
        return AnchorStatus("positive", t, Provenance(int(self.provenance[i])))

    def statuses(self) -> list[AnchorStatus]:
        return [self.status(i) for i in range(self.anchor_count)]

    def same_decisions(self, other: "AssignmentLabeling") -> bool:
        """True when both labelings agree on every verdict and target, ignoring provenance."""
        return self.target_count == other.target_count and np.array_equal(self.target, other.target)

    def summary(self) -> dict[str, int]:
        pos = self.target >= 0
        out = {name: int(np.sum(pos & (self.provenance == p))) for p, name in _PROVENANCE_NAMES.items()}
        out["positives"] = int(pos.sum())
        out["negatives"] = int(np.sum(self.target == NEGATIVE))
        out["ignores"] = int(np.sum(self.target == IGNORE))
        return out

    def to_json_dict(self) -> dict:
        records = []
        for i, st in enumerate(self.statuses()):
            rec: dict = {"index": i, "status": st.kind}
            if st.kind == "positive":
                rec["target"] = st.target
                rec["provenance"] = _PROVENANCE_NAMES[st.provenance]
            records.append(rec)
        return {"anchor_count": self.anchor_count, "target_count": self.target_count,
                "anchors": records, "summary": self.summary()}

    @classmethod
    def from_json_dict(cls, data: dict) -> "AssignmentLabeling":
        by_name = {v: k for k, v in _PROVENANCE_NAMES.items()}
        n = int(data["anchor_count"])
        target = np.full(n, NEGATIVE, dtype=np.int64)
        prov = np.full(n, Provenance.NONE, dtype=np.int64)
        for rec in data["anchors"]:
            i = int(rec["index"])
            if rec["status"] == "positive":
                target[i] = int(rec["target"])
                prov[i] = by_name[rec["provenance"]]
            elif rec["status"] == "ignore":
                target[i] = IGNORE
        return cls(target, prov, int(data["target_count"]))


@dataclass
class FirstStage:
    """Everything TSAA computes once from the raw anchors.

    ``labeling`` is the baseline labeling (stage-1 verdicts with low-quality
    overrides). ``frozen`` marks the low-quality anchors, ``candidates``
    which targets an anchor may ever be assigned to.
    """

    labeling: AssignmentLabeling
    anchor_iou: np.ndarray
    candidates: np.ndarray
    frozen: np.ndarray
    lq_pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def adaptive(self) -> np.ndarray:
        """Indices of positive anchors that stage 2 may reassign."""
        return np.flatnonzero(self.labeling.positive & ~self.frozen)


def _targets_array(targets: Sequence[Box] | np.ndarray) -> np.ndarray:
    if isinstance(targets, np.ndarray):
        arr = targets.reshape(-1, 4).astype(np.float64)
    else:
        arr = boxes_to_array(targets)
    if arr.shape[0] == 0:
        raise EmptyInputError("assignment needs at least one target (empty scene)")
    return arr


def _masked_argmax(scores: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    masked = np.where(mask, scores, -np.inf)
    best = np.argmax(masked, axis=1)
    return best, masked[np.arange(masked.shape[0]), best]


def _low_quality_pairs(ious: np.ndarray, allowed: Optional[np.ndarray] = None) -> list[tuple[int, int]]:
    n_anchors, n_targets = ious.shape
    if n_anchors < n_targets:
        raise InfeasibleError(f"{n_targets} targets cannot each claim a distinct anchor among {n_anchors}")
    score = ious if allowed is None else np.where(allowed, ious, -np.inf)
    claimed = np.zeros(n_anchors, dtype=bool)
    result = {}
    pending = list(range(n_targets))
    while pending:
        proposals: dict[int, list[int]] = {}
        for t in pending:
            col = np.where(claimed, -np.inf, score[:, t])
            a = int(np.argmax(col))
            if col[a] == -np.inf:
                raise InfeasibleError(f"target {t} has no unclaimed eligible anchor")
            proposals.setdefault(a, []).append(t)
        losers = []
        for a in sorted(proposals):
            contenders = proposals[a]
            winner = max(contenders, key=lambda t: (score[a, t], -t))
            result[winner] = a
            claimed[a] = True
            losers.extend(t for t in contenders if t != winner)
        pending = sorted(losers)
    return [(t, result[t]) for t in range(n_targets)]


def low_quality_match(anchors: AnchorSet, targets: Sequence[Box]) -> list[tuple[int, int]]:
    """One distinct anchor per target: its highest-IoU anchor, whatever the IoU.

    When several targets want the same anchor the one with the higher IoU
    keeps it and the others move on to their best unclaimed anchor. Returns
    ``(target_index, anchor_index)`` pairs ordered by target.
    """
    t = _targets_array(targets)
    return _low_quality_pairs(pairwise_iou(anchors.array, t))


def _cell_index(centers: np.ndarray, strides: np.ndarray) -> np.ndarray:
    return np.floor(centers / strides[:, None])


def _same_cell(anchors: AnchorSet, t: np.ndarray) -> np.ndarray:
    strides = anchors.stride_array()
    a_cell = _cell_index(anchors.array[:, :2], strides)
    # floor(C_t) in each anchor's own cell units
    t_cell = np.floor(t[None, :, :2] / strides[:, None, None])
    return np.all(a_cell[:, None, :] == t_cell, axis=2)


def _cell_interior(anchors: AnchorSet, t: np.ndarray) -> np.ndarray:
    strides = anchors.stride_array()
    frac = (t[None, :, :2] - anchors.origin_array()[:, None, :]) / strides[:, None, None]
    return np.all((frac > CELL_EPS) & (frac < 1.0 - CELL_EPS), axis=2)


def yolo_positive_mask(anchors: AnchorSet, targets: Sequence[Box] | np.ndarray,
                       cfg: AssignerConfig) -> np.ndarray:
    """``(L, K)`` mask: extents within a factor ``r_t`` and centers in the same cell."""
    if not anchors.has_cells:
        raise ContractError("the YOLO positivity rule needs anchors with cell metadata")
    t = _targets_array(targets)
    a = anchors.array
    rw = a[:, None, 2] / t[None, :, 2]
    rh = a[:, None, 3] / t[None, :, 3]
    worst = np.maximum.reduce([rw, 1.0 / rw, rh, 1.0 / rh])
    return (worst <= cfg.r_t) & _same_cell(anchors, t)


def first_stage(anchors: AnchorSet, targets: Sequence[Box] | np.ndarray,
                cfg: AssignerConfig) -> FirstStage:
    t = _targets_array(targets)
    n = len(anchors)
    ious = pairwise_iou(anchors.array, t)
    label = np.full(n, NEGATIVE, dtype=np.int64)

    if cfg.rule is PositivityRule.MAX_IOU:
        candidates = np.ones_like(ious, dtype=bool)
        best = np.argmax(ious, axis=1)
        best_iou = ious[np.arange(n), best]
        pos = best_iou >= cfg.positive_threshold
        label[(best_iou >= cfg.negative_threshold) & ~pos] = IGNORE
        lq_allowed = None
    else:
        # centres within CELL_EPS of an edge stay out so sigmoid targets are encodable
        interior = _cell_interior(anchors, t)
        if cfg.yolo_ratio_condition:
            candidates = yolo_positive_mask(anchors, t, cfg) & interior
        else:
            candidates = _same_cell(anchors, t) & interior & (ious >= cfg.nt_pos)
        best, best_score = _masked_argmax(ious, candidates)
        pos = best_score > -np.inf
        lq_allowed = interior
    label[pos] = best[pos]
    prov = np.where(pos, Provenance.STAGE1, Provenance.NONE).astype(np.int64)

    pairs = _low_quality_pairs(ious, lq_allowed)
    frozen = np.zeros(n, dtype=bool)
    for ti, ai in pairs:
        label[ai] = ti
        prov[ai] = Provenance.LOW_QUALITY
        frozen[ai] = True
        candidates[ai, ti] = True
    return FirstStage(AssignmentLabeling(label, prov, t.shape[0]), ious, candidates, frozen, pairs)


def baseline_assign(anchors: AnchorSet, targets: Sequence[Box], cfg: AssignerConfig) -> AssignmentLabeling:
    return first_stage(anchors, targets, cfg).labeling


def second_stage_scores(first: FirstStage, pred_boxes: np.ndarray, targets: np.ndarray,
                        cfg: AssignerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Scores of the adaptive anchors against all targets; rows follow ``first.adaptive``."""
    idx = first.adaptive
    scores = pairwise_iou(pred_boxes[idx], targets) if idx.size else np.zeros((0, targets.shape[0]))
    if cfg.mode is Mode.TWO_STAGE:
        scores = scores + first.anchor_iou[idx]
    return idx, scores


def second_stage(first: FirstStage, pred_boxes: np.ndarray, targets: Sequence[Box] | np.ndarray,
                 cfg: AssignerConfig) -> AssignmentLabeling:
    """Reassign every non-frozen positive anchor to the target its prediction overlaps most.

    ``pred_boxes`` is the ``(L, 4)`` decoded prediction array for all anchors.
    A prediction that overlaps no eligible target keeps its stage-1 target.
    """
    t = _targets_array(targets)
    idx, scores = second_stage_scores(first, pred_boxes, t, cfg)
    label = first.labeling.target.copy()
    prov = first.labeling.provenance.copy()
    if idx.size:
        best, best_score = _masked_argmax(scores, first.candidates[idx])
        moved = best_score > 0
        label[idx[moved]] = best[moved]
        prov[idx[moved]] = Provenance.STAGE2_ADAPTIVE
    return AssignmentLabeling(label, prov, t.shape[0])


def decode_offsets(anchors: AnchorSet, offsets: np.ndarray, codec_kind: CodecKind) -> np.ndarray:
    codec_kind = CodecKind(codec_kind)
    if codec_kind is CodecKind.LINEAR:
        return decode_linear_array(anchors.array, offsets)
    if not anchors.has_cells:
        raise ContractError("the sigmoid codec needs anchors with cell metadata")
    return decode_sigmoid_array(anchors.origin_array(), anchors.stride_array(), anchors.array, offsets)


def _offsets_array(offsets: Sequence[OffsetVector] | np.ndarray) -> np.ndarray:
    if isinstance(offsets, np.ndarray):
        return offsets.reshape(-1, 4).astype(np.float64)
    return np.array([o.as_tuple() for o in offsets], dtype=np.float64).reshape(-1, 4)


def tsaa_assign(anchors: AnchorSet, offsets: Sequence[OffsetVector] | np.ndarray,
                targets: Sequence[Box], cfg: AssignerConfig,
                codec_kind: CodecKind = CodecKind.LINEAR) -> AssignmentLabeling:
    off = _offsets_array(offsets)
    if off.shape[0] != len(anchors):
        raise ContractError(f"{off.shape[0]} offsets for {len(anchors)} anchors")
    first = first_stage(anchors, targets, cfg)
    return second_stage(first, decode_offsets(anchors, off, codec_kind), targets, cfg)


def build_target_array(labeling: AssignmentLabeling, anchors: AnchorSet,
                       targets: Sequence[Box] | np.ndarray,
                       codec_kind: CodecKind = CodecKind.LINEAR) -> tuple[np.ndarray, np.ndarray]:
    """Encoded regression targets for the positive anchors as ``(indices, (P, 4) offsets)``."""
    if labeling.anchor_count != len(anchors):
        raise ContractError("labeling and anchor set sizes differ")
    t = _targets_array(targets)
    if labeling.target_count != t.shape[0]:
        raise ContractError("labeling and target list sizes differ")
    idx = labeling.positive_indices()
    assigned = t[labeling.target[idx]]
    a = anchors.array[idx]
    if CodecKind(codec_kind) is CodecKind.LINEAR:
        return idx, encode_linear_array(a, assigned)
    if not anchors.has_cells:
        raise ContractError("the sigmoid codec needs anchors with cell metadata")
    return idx, encode_sigmoid_array(anchors.origin_array()[idx], anchors.stride_array()[idx], a, assigned)


def build_targets(labeling: AssignmentLabeling, anchors: AnchorSet, targets: Sequence[Box],
                  codec_kind: CodecKind = CodecKind.LINEAR) -> dict[int, OffsetVector]:
    idx, off = build_target_array(labeling, anchors, targets, codec_kind)
    return {int(i): OffsetVector(*map(float, row)) for i, row in zip(idx, off)}


def with_frozen_check(first: FirstStage, labeling: AssignmentLabeling) -> bool:
    """True when every low-quality pair of ``first`` survives unchanged in ``labeling``."""
    return all(labeling.target[a] == t and labeling.provenance[a] == Provenance.LOW_QUALITY
               for t, a in first.lq_pairs)


__all__ = [
    "AnchorStatus", "AssignerConfig", "AssignmentLabeling", "FirstStage", "IGNORE", "Mode",
    "NEGATIVE", "PositivityRule", "Provenance", "baseline_assign", "build_target_array",
    "build_targets", "decode_offsets", "first_stage", "low_quality_match", "second_stage",
    "second_stage_scores", "tsaa_assign", "with_frozen_check", "yolo_positive_mask",
]

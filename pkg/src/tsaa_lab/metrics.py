"""Detection metrics: AP, log-average miss rate, Jaccard index, and MITP.

All evaluators take detections and ground truth grouped per scene, in the
same scene order. Cross-scene reductions always run in that order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import UndefinedMetricError
from .geometry import Box, boxes_to_array, paired_iou, pairwise_iou
from .nms import Detection

log = logging.getLogger(__name__)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
FPPI_REFS = np.logspace(-2.0, 0.0, 9)
MISS_EPS = 1e-10
COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclass
class EvalResult:
    ap: float
    mr2: float
    ji: float
    detail: list[float]
    ji_pooled: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["ap", "mr2", "ji", "ji_pooled"] + [f"mr_fppi_{r:.4g}" for r in FPPI_REFS]
        writer.writerow(header)
        writer.writerow([repr(v) for v in [self.ap, self.mr2, self.ji, self.ji_pooled, *self.detail]])
        return buf.getvalue()


def _scene_arrays(dets: Sequence[Detection]) -> tuple[np.ndarray, np.ndarray]:
    if not dets:
        return np.zeros((0, 4)), np.zeros(0)
    return boxes_to_array(d.box for d in dets), np.array([d.score for d in dets], dtype=np.float64)


def _match_scene(boxes: np.ndarray, scores: np.ndarray, gts: np.ndarray,
                 iou_thresh: float) -> np.ndarray:
    """TP flag per detection: highest-scoring first, each takes its best free GT."""
    tp = np.zeros(len(scores), dtype=bool)
    if len(scores) == 0 or len(gts) == 0:
        return tp
    ious = pairwise_iou(boxes, gts)
    free = np.ones(len(gts), dtype=bool)
    for i in np.lexsort((np.arange(len(scores)), -scores)):
        cand = np.where(free & (ious[i] >= iou_thresh), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0.0:
            tp[i] = True
            free[j] = False
    return tp


def _pooled(per_scene_dets, per_scene_gts, iou_thresh):
    if len(per_scene_dets) != len(per_scene_gts):
        raise ValueError("detections and ground truth must be aligned by scene")
    scores, flags = [], []
    n_gt = 0
    for dets, gts in zip(per_scene_dets, per_scene_gts):
        boxes, s = _scene_arrays(dets)
        g = boxes_to_array(gts) if len(gts) else np.zeros((0, 4))
        n_gt += len(g)
        scores.append(s)
        flags.append(_match_scene(boxes, s, g, iou_thresh))
    if n_gt == 0:
        raise UndefinedMetricError("metric undefined without ground-truth boxes")
    scores = np.concatenate(scores) if scores else np.zeros(0)
    flags = np.concatenate(flags) if flags else np.zeros(0, dtype=bool)
    # stable: equal scores keep scene order, then in-scene order
    order = np.argsort(-scores, kind="stable")
    return scores[order], flags[order], n_gt


def average_precision(per_scene_dets: Sequence[Sequence[Detection]],
                      per_scene_gts: Sequence[Sequence[Box]],
                      iou_thresh: float = 0.5) -> float:
    """101-point interpolated AP over detections pooled across scenes."""
    _, tp, n_gt = _pooled(per_scene_dets, per_scene_gts, iou_thresh)
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(inds < len(envelope), envelope[np.minimum(inds, len(envelope) - 1)], 0.0)
    return float(np.mean(q))


def coco_average_precision(per_scene_dets, per_scene_gts,
                           thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> float:
    return float(np.mean([average_precision(per_scene_dets, per_scene_gts, t) for t in thresholds]))


def log_average_miss_rate(per_scene_dets: Sequence[Sequence[Detection]],
                          per_scene_gts: Sequence[Sequence[Box]],
                          iou_thresh: float = 0.5) -> tuple[float, list[float]]:
    """MR^-2: geometric mean of miss rates at nine FPPI points in [1e-2, 1].

    Operating points are score thresholds (detections with equal scores enter
    together), plus the empty operating point above every score. At each
    reference FPPI the miss rate of the last operating point whose FPPI does
    not exceed it is taken.
    """
    if len(per_scene_gts) == 0:
        raise UndefinedMetricError("miss rate needs at least one scene")
    scores, tp, n_gt = _pooled(per_scene_dets, per_scene_gts, iou_thresh)
    n_img = len(per_scene_gts)
    tp_cum = np.concatenate([[0], np.cumsum(tp)])
    fp_cum = np.concatenate([[0], np.cumsum(~tp)])
    # keep only the last row of each run of equal scores
    last_of_run = np.concatenate([[True], np.append(scores[1:] != scores[:-1], True)]) if scores.size else np.array([True])
    tp_cum, fp_cum = tp_cum[last_of_run], fp_cum[last_of_run]
    fppi = fp_cum / n_img
    miss = 1.0 - tp_cum / n_gt
    idx = np.searchsorted(fppi, FPPI_REFS, side="right") - 1
    detail = miss[idx]
    if np.all(detail < MISS_EPS):
        return 0.0, [float(v) for v in detail]
    mr2 = float(np.exp(np.mean(np.log(np.maximum(detail, MISS_EPS)))))
    return mr2, [float(v) for v in detail]


def max_matching_size(ious: np.ndarray, iou_thresh: float) -> int:
    """Maximum-cardinality matching on the bipartite graph ``ious >= iou_thresh``."""
    if ious.size == 0:
        return 0
    graph = csr_matrix((ious >= iou_thresh).astype(np.int8))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.sum(match >= 0))


def _ji_counts(per_scene_dets, per_scene_gts, iou_thresh, score_thresh):
    if len(per_scene_dets) != len(per_scene_gts):
        raise ValueError("detections and ground truth must be aligned by scene")
    rows = []
    for dets, gts in zip(per_scene_dets, per_scene_gts):
        kept = [d for d in dets if d.score >= score_thresh]
        nd, ng = len(kept), len(gts)
        m = 0
        if nd and ng:
            m = max_matching_size(pairwise_iou(boxes_to_array(d.box for d in kept), boxes_to_array(gts)),
                                  iou_thresh)
        rows.append((nd, ng, m))
    if sum(r[1] for r in rows) == 0:
        raise UndefinedMetricError("Jaccard index undefined without ground-truth boxes")
    return rows


def _scene_ji(nd: int, ng: int, m: int) -> float:
    if nd == 0 and ng == 0:
        return 1.0
    return m / (nd + ng - m)


def jaccard_index(per_scene_dets: Sequence[Sequence[Detection]],
                  per_scene_gts: Sequence[Sequence[Box]],
                  iou_thresh: float = 0.5, score_thresh: float = 0.0) -> float:
    """GT-weighted mean of per-scene ``|M| / (|D| + |G| - |M|)``."""
    rows = _ji_counts(per_scene_dets, per_scene_gts, iou_thresh, score_thresh)
    total = sum(ng for _, ng, _ in rows)
    return float(sum(ng * _scene_ji(nd, ng, m) for nd, ng, m in rows) / total)


def jaccard_index_pooled(per_scene_dets, per_scene_gts, iou_thresh: float = 0.5,
                         score_thresh: float = 0.0) -> float:
    rows = _ji_counts(per_scene_dets, per_scene_gts, iou_thresh, score_thresh)
    m = sum(r[2] for r in rows)
    denom = sum(nd + ng - mm for nd, ng, mm in rows)
    return float(m / denom) if denom else 1.0


def mitp(positive_pred_boxes: Sequence[Box] | np.ndarray,
         assigned_targets: Sequence[Box] | np.ndarray) -> float:
    """Minimum IoU over (prediction, assigned target) pairs of one scene."""
    p = positive_pred_boxes if isinstance(positive_pred_boxes, np.ndarray) else boxes_to_array(positive_pred_boxes)
    t = assigned_targets if isinstance(assigned_targets, np.ndarray) else boxes_to_array(assigned_targets)
    if p.shape[0] == 0 or p.shape[0] != t.shape[0]:
        raise UndefinedMetricError("MITP needs a non-empty, aligned set of pairs")
    return float(np.min(paired_iou(p.reshape(-1, 4), t.reshape(-1, 4))))


def evaluate(per_scene_dets, per_scene_gts, iou_thresh: float = 0.5,
             ji_score_thresh: float = 0.0) -> EvalResult:
    ap = average_precision(per_scene_dets, per_scene_gts, iou_thresh)
    mr2, detail = log_average_miss_rate(per_scene_dets, per_scene_gts, iou_thresh)
    ji = jaccard_index(per_scene_dets, per_scene_gts, iou_thresh, ji_score_thresh)
    ji_pooled = jaccard_index_pooled(per_scene_dets, per_scene_gts, iou_thresh, ji_score_thresh)
    log.info("JI gt-weighted=%.4f pooled=%.4f", ji, ji_pooled)
    return EvalResult(ap=ap, mr2=mr2, ji=ji, detail=detail, ji_pooled=ji_pooled)

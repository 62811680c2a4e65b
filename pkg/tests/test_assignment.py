import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from tsaa_lab.anchors import AnchorSet, PriorGridSpec, generate_from_spec
from tsaa_lab.assignment import (IGNORE, NEGATIVE, AssignerConfig, AssignmentLabeling, Mode, Provenance,
                                 baseline_assign, build_target_array, build_targets, decode_offsets,
                                 first_stage, low_quality_match, second_stage, second_stage_scores,
                                 tsaa_assign, with_frozen_check, yolo_positive_mask)
from tsaa_lab.codec import CodecKind, OffsetVector, decode_linear_array
from tsaa_lab.errors import ContractError, EmptyInputError, InfeasibleError
from tsaa_lab.geometry import Box, array_to_boxes

RETINA = AssignerConfig.retinanet()
seeds = st.integers(0, 2**32 - 1)


def aset(rows):
    return AnchorSet.from_arrays(np.asarray(rows, dtype=float))


def instance(seed, lattice=None):
    rng = np.random.default_rng(seed)
    lattice = bool(rng.integers(2)) if lattice is None else lattice
    a, t = oracles.random_instance(rng, lattice=lattice)
    off = rng.normal(0, 0.3, size=a.shape)
    return rng, a, t, off


# -- hand-built cases -----------------------------------------------------------


def test_single_anchor_equal_to_target():
    lab = baseline_assign(aset([[5, 5, 4, 4]]), [Box(5, 5, 4, 4)], RETINA)
    assert lab.status(0).kind == "positive" and lab.status(0).target == 0


def test_ignore_band():
    # anchor 1 overlaps the target by exactly 0.45
    t = Box(0.5, 0.5, 1, 1)
    shift = 1 - 2 * 0.45 / 1.45
    lab = baseline_assign(aset([[0.5, 0.5, 1, 1], [0.5 + shift, 0.5, 1, 1], [9, 9, 1, 1]]), [t], RETINA)
    assert lab.target.tolist() == [0, IGNORE, NEGATIVE]


def test_low_quality_block_diagonal():
    anchors = aset([[0, 0, 2, 2], [10, 10, 2, 2]])
    pairs = low_quality_match(anchors, [Box(10.2, 10, 2, 2), Box(0.3, 0, 2, 2)])
    assert pairs == [(0, 1), (1, 0)]


def test_low_quality_contention():
    # anchor 0 is best for both targets; target 1 overlaps it more and keeps it
    anchors = aset([[0, 0, 4, 4], [-2.0, 0, 4, 4], [3, 0, 4, 4]])
    targets = [Box(-0.8, 0, 4, 4), Box(0.2, 0, 4, 4)]
    ious = [[oracles.iou(a, t.as_tuple()) for t in targets] for a in anchors.array]
    assert np.argmax([r[0] for r in ious]) == 0 and np.argmax([r[1] for r in ious]) == 0
    assert ious[0][1] > ious[0][0]
    # loser's second choice, enumerated
    second = max((1, 2), key=lambda a: ious[a][0])
    assert low_quality_match(anchors, targets) == [(0, second), (1, 0)]


def test_low_quality_infeasible_and_empty():
    with pytest.raises(InfeasibleError):
        low_quality_match(aset([[0, 0, 1, 1]]), [Box(0, 0, 1, 1), Box(1, 1, 1, 1)])
    with pytest.raises(EmptyInputError):
        baseline_assign(aset([[0, 0, 1, 1]]), [], RETINA)


def _drift_fixture():
    # objects A and B side by side; anchor 2 sits nearer B
    targets = [Box(10, 10, 10, 20), Box(14, 10, 10, 20)]
    anchors = aset([[10, 10, 10, 20], [14, 10, 10, 20], [12.5, 10, 10, 20]])
    return anchors, targets


def test_drift_fixture_one_stage():
    anchors, targets = _drift_fixture()
    t = [b.as_tuple() for b in targets]
    assert oracles.iou(tuple(anchors.array[2]), t[1]) > oracles.iou(tuple(anchors.array[2]), t[0])
    pred = (10.5, 10, 10, 20)
    assert oracles.iou(pred, t[0]) > oracles.iou(pred, t[1])
    off = np.zeros((3, 4))
    off[2, 0] = (pred[0] - 12.5) / 10
    base = baseline_assign(anchors, targets, RETINA)
    lab = tsaa_assign(anchors, off, targets, RETINA)
    assert base.status(2).target == 1
    assert lab.status(2).target == 0 and lab.status(2).provenance is Provenance.STAGE2_ADAPTIVE
    assert [lab.status(i).provenance for i in (0, 1)] == [Provenance.LOW_QUALITY] * 2


def test_drift_fixture_two_stage_keeps_anchor_iou_winner():
    anchors, targets = _drift_fixture()
    t = [b.as_tuple() for b in targets]
    a2 = tuple(anchors.array[2])
    pred = (11.9, 10, 10, 20)
    one = [oracles.iou(pred, x) for x in t]
    two = [oracles.iou(pred, x) + oracles.iou(a2, x) for x in t]
    assert one[0] > one[1] and two[0] < two[1]
    off = np.zeros((3, 4))
    off[2, 0] = (pred[0] - 12.5) / 10
    assert tsaa_assign(anchors, off, targets, RETINA).status(2).target == 0
    cfg = AssignerConfig(nt_proposal=0.5, mode=Mode.TWO_STAGE)
    assert tsaa_assign(anchors, off, targets, cfg).status(2).target == 1


def test_prediction_overlapping_nothing_keeps_stage1_target():
    anchors, targets = _drift_fixture()
    off = np.zeros((3, 4))
    off[2, 0] = 10.0  # far to the right of both objects
    lab = tsaa_assign(anchors, off, targets, RETINA)
    assert lab.status(2).target == 1 and lab.status(2).provenance is Provenance.STAGE1


def test_two_stage_has_no_ignore_band(rng):
    cfg = AssignerConfig(nt_pos=0.7, nt_neg=0.3, nt_proposal=0.5, mode="two_stage")
    for _ in range(20):
        a, t = oracles.random_instance(rng)
        lab = baseline_assign(aset(a), array_to_boxes(t), cfg)
        assert not np.any(lab.target == IGNORE)
        ref, _, _, _ = oracles.baseline([tuple(r) for r in a], [tuple(r) for r in t], 0.5, 0.5)
        assert lab.target.tolist() == ref


def test_offsets_length_mismatch():
    anchors, targets = _drift_fixture()
    with pytest.raises(ContractError):
        tsaa_assign(anchors, np.zeros((2, 4)), targets, RETINA)


def test_offset_vectors_accepted():
    anchors, targets = _drift_fixture()
    lab = tsaa_assign(anchors, [OffsetVector.zero()] * 3, targets, RETINA)
    assert lab.same_decisions(baseline_assign(anchors, targets, RETINA))


# -- oracle equivalence and properties -----------------------------------------


@pytest.mark.parametrize("seed", range(200))
def test_matches_bruteforce(seed):
    _, a, t, off = instance(seed)
    A, T = [tuple(r) for r in a], [tuple(r) for r in t]
    preds = [oracles.decode_linear(x, o) for x, o in zip(A, off)]
    base = baseline_assign(aset(a), array_to_boxes(t), RETINA)
    label, prov, _, _ = oracles.baseline(A, T, 0.5, 0.4)
    assert base.target.tolist() == label and base.provenance.tolist() == prov
    lab = tsaa_assign(aset(a), off, array_to_boxes(t), RETINA)
    label, prov = oracles.tsaa(A, preds, T, 0.5, 0.4)
    assert lab.target.tolist() == label and lab.provenance.tolist() == prov


@given(seeds)
def test_reduction_with_zero_offsets(seed):
    _, a, t, _ = instance(seed)
    anchors, targets = aset(a), array_to_boxes(t)
    lab = tsaa_assign(anchors, np.zeros_like(a), targets, RETINA)
    assert lab.same_decisions(baseline_assign(anchors, targets, RETINA))


@given(seeds, st.sampled_from([AssignerConfig.retinanet(), AssignerConfig.faster_rcnn_rpn(),
                               AssignerConfig.faster_rcnn_rcnn()]))
def test_recall_and_positive_set_stability(seed, cfg):
    _, a, t, off = instance(seed)
    anchors, targets = aset(a), array_to_boxes(t)
    base = baseline_assign(anchors, targets, cfg)
    lab = tsaa_assign(anchors, off, targets, cfg)
    for l in (base, lab):
        assert set(l.target[l.positive].tolist()) == set(range(len(t)))
    assert np.array_equal(base.positive, lab.positive)
    assert np.array_equal(base.target < 0, lab.target < 0) and np.array_equal(base.target[~base.positive],
                                                                              lab.target[~lab.positive])


@given(seeds, st.booleans())
def test_stage2_postcondition(seed, two_stage):
    _, a, t, off = instance(seed)
    cfg = AssignerConfig(mode=Mode.TWO_STAGE) if two_stage else RETINA
    anchors = aset(a)
    first = first_stage(anchors, t, cfg)
    pred = decode_linear_array(a, off)
    lab = second_stage(first, pred, t, cfg)
    idx, scores = second_stage_scores(first, pred, t, cfg)
    for row, i in enumerate(idx):
        if lab.provenance[i] == Provenance.STAGE2_ADAPTIVE:
            assert scores[row, lab.target[i]] == scores[row].max()
            assert lab.target[i] == int(np.argmax(scores[row]))
        else:
            assert lab.provenance[i] == Provenance.STAGE1 and scores[row].max() <= 0
    assert with_frozen_check(first, lab)
    assert sorted(first.lq_pairs) == sorted(low_quality_match(anchors, array_to_boxes(t)))
    for t_i, a_i in first.lq_pairs:
        assert lab.target[a_i] == t_i and lab.provenance[a_i] == Provenance.LOW_QUALITY


def test_frozen_check_detects_tampering():
    anchors, targets = _drift_fixture()
    first = first_stage(anchors, targets, RETINA)
    bad = AssignmentLabeling(first.labeling.target.copy(), first.labeling.provenance.copy(), 2)
    bad.target[first.lq_pairs[0][1]] = 1 - first.lq_pairs[0][0]
    assert not with_frozen_check(first, bad)


# -- targets --------------------------------------------------------------------


def test_build_targets_identity_and_absence():
    anchors, targets = _drift_fixture()
    lab = baseline_assign(anchors, targets, RETINA)
    out = build_targets(lab, anchors, targets)
    assert out[0] == OffsetVector.zero() and out[1] == OffsetVector.zero()
    neg = AssignmentLabeling(np.array([0, 1, NEGATIVE]), np.array([0, 0, -1]), 2)
    assert set(build_targets(neg, anchors, targets)) == {0, 1}


@given(seeds)
def test_build_targets_round_trip(seed):
    _, a, t, off = instance(seed)
    anchors = aset(a)
    lab = tsaa_assign(anchors, off, array_to_boxes(t), RETINA)
    idx, enc = build_target_array(lab, anchors, t)
    back = decode_offsets(AnchorSet.from_arrays(a[idx]), enc, CodecKind.LINEAR)
    assert np.max(np.abs(back - t[lab.target[idx]])) < 1e-9


def test_labeling_json_round_trip():
    _, a, t, off = instance(7)
    lab = tsaa_assign(aset(a), off, array_to_boxes(t), RETINA)
    back = AssignmentLabeling.from_json_dict(lab.to_json_dict())
    assert np.array_equal(back.target, lab.target) and np.array_equal(back.provenance, lab.provenance)
    s = lab.summary()
    assert s["positives"] == s["low_quality"] + s["stage1"] + s["stage2_adaptive"]
    assert s["positives"] + s["negatives"] + s["ignores"] == len(a)


# -- YOLO rule ------------------------------------------------------------------


def _yolo_anchors():
    return generate_from_spec(PriorGridSpec(4, 4, 8.0, ((6.0, 12.0),)))


def test_yolo_mask_hand_cases():
    anchors = _yolo_anchors()
    cfg = AssignerConfig.yolo()
    # anchor 5 owns cell (1, 1): x, y in [8, 16)
    same = yolo_positive_mask(anchors, [Box(12, 12, 6, 12)], cfg)
    assert same[5, 0] and same.sum() == 1
    wide = yolo_positive_mask(anchors, [Box(12, 12, 30.0, 12)], cfg)  # W_t / W_a = 5
    assert not wide.any()
    across = yolo_positive_mask(anchors, [Box(16.5, 12, 6, 12)], cfg)  # just into cell (2, 1)
    assert not across[5, 0] and across[6, 0]
    with pytest.raises(ContractError):
        yolo_positive_mask(aset([[0, 0, 1, 1]]), [Box(0, 0, 1, 1)], cfg)


@given(seeds, st.booleans())
def test_yolo_assignment_is_encodable(seed, ratio_condition):
    rng = np.random.default_rng(seed)
    anchors = generate_from_spec(PriorGridSpec(4, 4, 8.0, ((4.0, 8.0), (8.0, 16.0))))
    n = int(rng.integers(1, 6))
    # distinct cells: a cell holds only two priors, so crowding one is infeasible
    cells = rng.choice(16, size=n, replace=False)
    centers = np.column_stack([cells % 4, cells // 4]) * 8.0 + rng.uniform(0.5, 7.5, (n, 2))
    t = np.column_stack([centers, rng.uniform(2, 20, (n, 2))])
    cfg = AssignerConfig(rule="yolo", yolo_ratio_condition=ratio_condition, nt_pos=0.3, nt_neg=0.2)
    off = rng.normal(0, 1, (len(anchors), 4))
    lab = tsaa_assign(anchors, off, array_to_boxes(t), cfg, CodecKind.SIGMOID)
    assert set(lab.target[lab.positive].tolist()) == set(range(n))
    idx, enc = build_target_array(lab, anchors, t, CodecKind.SIGMOID)
    back = decode_offsets(AnchorSet.from_arrays(anchors.array[idx], anchors.origin_array()[idx],
                                                anchors.stride_array()[idx]), enc, CodecKind.SIGMOID)
    assert np.max(np.abs(back - t[lab.target[idx]])) < 1e-7
    first = first_stage(anchors, t, cfg)
    for i in first.adaptive:
        assert first.candidates[i, lab.target[i]]


def test_yolo_low_quality_needs_room_in_the_cell():
    anchors = generate_from_spec(PriorGridSpec(2, 2, 8.0, ((4.0, 8.0),)))
    with pytest.raises(InfeasibleError):
        baseline_assign(anchors, [Box(3, 3, 4, 8), Box(5, 5, 4, 8)], AssignerConfig.yolo())

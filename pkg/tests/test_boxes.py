import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import greedy_nms, random_boxes, shapely_iou
from stripdet.boxes import (
    Box3D,
    Detection,
    assign_targets,
    bev_corners,
    decode_boxes,
    dir_bin,
    encode_boxes,
    iou_matrix,
    make_anchors,
    nms_bev,
    normalize_yaw,
    rotated_iou_bev,
)
from stripdet.config import AnchorSpec, GridSpec, ModelConfig

# --------------------------------------------------------------------------
# angles and boxes


def test_normalize_yaw_range():
    vals = normalize_yaw(np.array([-math.pi, math.pi, 3 * math.pi, 0.0, -0.5, 7.0]))
    assert np.all(vals > -math.pi) and np.all(vals <= math.pi)
    assert vals[0] == pytest.approx(math.pi)
    assert vals[1] == pytest.approx(math.pi)
    assert vals[4] == pytest.approx(-0.5)


def test_dir_bin():
    assert dir_bin(np.array([0.0, 1.0, math.pi - 1e-9, math.pi, -0.1, -math.pi / 2])).tolist() == [0, 0, 0, 1, 1, 1]


def test_box_validation_and_yaw():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 0, 1, 1, 0)
    b = Box3D(0, 0, 0, 1, 2, 1, 3 * math.pi / 2)
    assert b.yaw == pytest.approx(-math.pi / 2)
    assert type(Box3D(0, 0, 0, np.float64(1), 2, 1, 0).w) is float


def test_bev_corners_axis_aligned():
    c = bev_corners([1, 2, 0, 2, 4, 1, 0])
    assert np.allclose(sorted(c[:, 0]), [-1, -1, 3, 3])
    assert np.allclose(sorted(c[:, 1]), [1, 1, 3, 3])


# --------------------------------------------------------------------------
# IoU


def test_iou_hand_cases():
    a = Box3D(0, 0, 0, 2, 2, 1, 0)
    assert rotated_iou_bev(a, a) == pytest.approx(1.0, abs=1e-9)
    assert rotated_iou_bev(a, Box3D(5, 0, 0, 2, 2, 1, 0)) == 0.0
    assert rotated_iou_bev(a, Box3D(1, 0, 0, 2, 2, 1, 0)) == pytest.approx(1 / 3, abs=1e-9)


def test_iou_rotated_square_hand_case():
    # unit square vs itself rotated 45 degrees: octagon overlap 2*(sqrt2-1)
    a = Box3D(0, 0, 0, 1, 1, 1, 0)
    b = Box3D(0, 0, 0, 1, 1, 1, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    assert rotated_iou_bev(a, b) == pytest.approx(inter / (2 - inter), abs=1e-12)


def test_iou_quarter_turn_of_rectangle():
    a = Box3D(0, 0, 0, 1, 3, 1, 0)
    b = Box3D(0, 0, 0, 1, 3, 1, math.pi / 2)
    assert rotated_iou_bev(a, b) == pytest.approx(1 / 5, abs=1e-12)


def test_iou_half_turn_is_same_footprint():
    a = Box3D(1, 2, 0, 1.6, 3.9, 1.5, 0.3)
    b = Box3D(1, 2, 0, 1.6, 3.9, 1.5, 0.3 + math.pi)
    assert rotated_iou_bev(a, b) == pytest.approx(1.0, abs=1e-9)


def test_iou_degenerate_is_zero():
    assert rotated_iou_bev(np.array([0, 0, 0, 0, 1, 1, 0.0]), np.array([0, 0, 0, 1, 1, 1, 0.0])) == 0.0


def test_iou_touching_edges_is_zero():
    a = Box3D(0, 0, 0, 2, 2, 1, 0)
    assert rotated_iou_bev(a, Box3D(2, 0, 0, 2, 2, 1, 0)) == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_iou_matches_polygon_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = random_boxes(rng, 2, spread=1.5)
    got = rotated_iou_bev(a, b)
    assert got == pytest.approx(shapely_iou(a, b), abs=1e-9)
    assert 0.0 <= got <= 1.0
    assert abs(got - rotated_iou_bev(b, a)) <= 1e-12


def test_iou_matrix_agrees_with_pairwise(rng):
    a, b = random_boxes(rng, 6, 3.0), random_boxes(rng, 5, 3.0)
    m = iou_matrix(a, b)
    assert m.shape == (6, 5)
    for i in range(6):
        for j in range(5):
            assert m[i, j] == pytest.approx(rotated_iou_bev(a[i], b[j]), abs=1e-15)
    assert iou_matrix(a, np.zeros((0, 7))).shape == (6, 0)


# --------------------------------------------------------------------------
# NMS


def _dets(boxes, scores):
    return [Detection(Box3D.from_array(b), "Car", float(s)) for b, s in zip(boxes, scores)]


def test_nms_identical_boxes():
    box = [0, 0, 0, 1.6, 3.9, 1.5, 0.2]
    kept = nms_bev(_dets([box, box], [0.8, 0.9]), 0.5)
    assert [d.score for d in kept] == [0.9]


def test_nms_disjoint_all_kept():
    boxes = [[0, 0, 0, 1, 1, 1, 0], [5, 0, 0, 1, 1, 1, 0], [0, 5, 0, 1, 1, 1, 0]]
    assert len(nms_bev(_dets(boxes, [0.3, 0.9, 0.5]), 0.1)) == 3


def test_nms_tie_keeps_earlier():
    box = [0, 0, 0, 1.6, 3.9, 1.5, 0.0]
    dets = _dets([box, box], [0.7, 0.7])
    dets[1] = Detection(dets[1].box, "Other", 0.7)
    assert nms_bev(dets, 0.5)[0].label == "Car"


def test_nms_threshold_is_strict():
    a = [0, 0, 0, 2, 2, 1, 0]
    b = [1, 0, 0, 2, 2, 1, 0]  # IoU 1/3
    assert len(nms_bev(_dets([a, b], [0.9, 0.8]), 1 / 3 + 1e-9)) == 2
    assert len(nms_bev(_dets([a, b], [0.9, 0.8]), 0.3)) == 1


def test_nms_empty():
    assert nms_bev([], 0.5) == []


@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.sampled_from([0.0, 0.1, 0.3, 0.5]))
def test_nms_matches_greedy_oracle(seed, n, thr):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, n, spread=2.5)
    scores = np.round(rng.uniform(0, 1, n), 1)
    dets = _dets(boxes, scores)
    kept = nms_bev(dets, thr)
    expected = [dets[i] for i in greedy_nms(boxes, scores, thr)]
    assert kept == expected
    out_scores = [d.score for d in kept]
    assert out_scores == sorted(out_scores, reverse=True)


# --------------------------------------------------------------------------
# encode / decode


ANCHORS = np.array([[1.0, 2.0, -1.78, 1.6, 3.9, 1.56, 0.0], [0.0, 0.0, -0.6, 0.6, 0.8, 1.73, math.pi / 2]])


def test_decode_zero_deltas_is_anchor():
    boxes, idx = decode_boxes(np.zeros((2, 7)), ANCHORS)
    assert idx.tolist() == [0, 1]
    assert np.allclose(boxes, ANCHORS, rtol=0, atol=1e-15)


def test_decode_width_doubles():
    d = np.zeros((1, 7))
    d[0, 3] = math.log(2)
    boxes, _ = decode_boxes(d, ANCHORS[:1])
    assert boxes[0, 3] == pytest.approx(2 * 1.6, rel=1e-15)


def test_decode_drops_non_finite(caplog):
    d = np.zeros((3, 7))
    d[1, 0] = np.nan
    d[2, 4] = 1e6
    with caplog.at_level("WARNING"):
        boxes, idx = decode_boxes(d, np.vstack([ANCHORS, ANCHORS[:1]]))
    assert idx.tolist() == [0]
    assert "dropped 2" in caplog.text


def test_decode_direction_flip():
    d = np.zeros((1, 7))
    d[0, 6] = 0.3
    same, _ = decode_boxes(d, ANCHORS[:1], dir_bins=np.array([0]))
    flipped, _ = decode_boxes(d, ANCHORS[:1], dir_bins=np.array([1]))
    assert same[0, 6] == pytest.approx(0.3)
    assert flipped[0, 6] == pytest.approx(0.3 - math.pi)


@given(st.integers(0, 2**31 - 1))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = 16
    anchors = random_boxes(rng, n)
    deltas = rng.uniform(-1, 1, size=(n, 7))
    deltas[:, 6] = rng.uniform(-math.pi / 2, math.pi / 2, n)
    boxes, idx = decode_boxes(deltas, anchors)
    assert len(idx) == n
    assert np.allclose(encode_boxes(boxes, anchors), deltas, rtol=0, atol=1e-9)


def test_encode_with_dir_bin_recovers_heading(rng):
    anchors = random_boxes(rng, 20)
    gt = random_boxes(rng, 20)
    deltas = encode_boxes(gt, anchors)
    assert np.all(np.abs(deltas[:, 6]) <= math.pi / 2)
    boxes, _ = decode_boxes(deltas, anchors, dir_bins=dir_bin(gt[:, 6]))
    assert np.allclose(np.cos(boxes[:, 6] - gt[:, 6]), 1.0, atol=1e-9)
    assert np.allclose(boxes[:, :6], gt[:, :6], atol=1e-9)


# --------------------------------------------------------------------------
# anchors and assignment


def _cfg():
    grid = GridSpec(x_range=(0.0, 5.12), y_range=(-2.56, 2.56))
    return ModelConfig(
        grid=grid,
        anchors=(AnchorSpec("Car", 1.6, 3.9, 1.56, -1.78), AnchorSpec("Cyclist", 0.6, 1.76, 1.73, -0.6, match_iou=0.5, unmatch_iou=0.35)),
    )


def test_make_anchors_layout():
    cfg = _cfg()
    a = make_anchors(cfg, 4, 5)
    assert len(a) == 4 * 5 * 4
    assert a.per_cell == 4
    first = a.boxes[:4]
    assert np.allclose(first[:, 0], 5.12 / 10) and np.allclose(first[:, 1], -2.56 + 5.12 / 8)
    assert first[:, 6].tolist() == [0.0, math.pi / 2, 0.0, math.pi / 2]
    assert a.classes[:4].tolist() == [0, 0, 1, 1]
    # next cell moves one column right
    assert a.boxes[4, 0] - a.boxes[0, 0] == pytest.approx(5.12 / 5)


def test_anchor_spec_validation():
    with pytest.raises(ValueError):
        AnchorSpec("Car", 1.6, 3.9, 1.56, -1.78, match_iou=0.4, unmatch_iou=0.45)


def test_assign_identical_anchor_positive():
    cfg = _cfg()
    anchors = make_anchors(cfg, 4, 4)
    gt = anchors.boxes[6:7].copy()
    t = assign_targets(anchors, gt, [int(anchors.classes[6])])
    assert t.labels[6] == anchors.classes[6] + 1
    assert np.allclose(t.box_targets[6], 0.0, atol=1e-12)
    assert t.matched_gt[6] == 0


def test_assign_no_gt_all_negative():
    anchors = make_anchors(_cfg(), 3, 3)
    t = assign_targets(anchors, np.zeros((0, 7)), [])
    assert (t.labels == 0).all() and t.num_positive == 0


def test_assign_ignores_between_thresholds():
    cfg = _cfg()
    anchors = make_anchors(cfg, 4, 4)
    t = assign_targets(anchors, anchors.boxes[0:1], [0])
    ious = iou_matrix(anchors.boxes, anchors.boxes[0:1])[:, 0]
    same = anchors.classes == 0
    mid = same & (ious >= 0.45) & (ious < 0.6)
    assert (t.labels[mid] == -1).all()
    assert (t.labels[~same] == 0).all()  # other-class anchors never match


@given(st.integers(0, 2**31 - 1))
def test_every_gt_claims_argmax_anchor(seed):
    rng = np.random.default_rng(seed)
    grid = GridSpec(x_range=(0.0, 1.28), y_range=(0.0, 1.28))
    cfg = ModelConfig(grid=grid, anchors=(AnchorSpec("Car", 1.6, 3.9, 1.56, -1.78, yaws=(0.0, 0.7)),))
    anchors = make_anchors(cfg, 2, 5)  # 20 anchors
    gt = np.array([[rng.uniform(0, 1.28), rng.uniform(0, 1.28), -1.78, 0.5, 0.6, 1.5, rng.uniform(-math.pi, math.pi)]])
    t = assign_targets(anchors, gt, [0])
    ious = [rotated_iou_bev(anchors.boxes[i], gt[0]) for i in range(len(anchors))]
    best = int(np.argmax(ious))
    assert max(ious) < cfg.anchors[0].unmatch_iou
    assert t.labels[best] == 1
    assert t.num_positive == 1
    assert np.allclose(t.box_targets[best], encode_boxes(gt, anchors.boxes[best:best + 1])[0])
    assert t.dir_targets[best] == dir_bin(gt[0, 6])

"""Oriented boxes: BEV overlap, NMS, anchor encoding and target assignment.

Box arrays use the column order ``(x, y, z, w, l, h, yaw)``. The length
``l`` runs along the heading direction, the width ``w`` across it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import ModelConfig

logger = logging.getLogger(__name__)

__all__ = [
    "Box3D",
    "Detection",
    "AnchorTargets",
    "normalize_yaw",
    "dir_bin",
    "bev_corners",
    "rotated_iou_bev",
    "iou_matrix",
    "nms_bev",
    "encode_boxes",
    "decode_boxes",
    "make_anchors",
    "assign_targets",
]


def normalize_yaw(yaw):
    """Wrap angles into ``(-pi, pi]``."""
    return math.pi - np.mod(math.pi - np.asarray(yaw, dtype=np.float64), 2 * math.pi)


def dir_bin(yaw):
    """0 for headings in ``[0, pi)`` (mod 2pi), else 1."""
    return (np.mod(np.asarray(yaw, dtype=np.float64), 2 * math.pi) >= math.pi).astype(np.int64)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("x", "y", "z", "w", "l", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.w, self.l, self.h) <= 0:
            raise ValueError(f"box dimensions must be positive: {self}")
        object.__setattr__(self, "yaw", float(normalize_yaw(self.yaw)))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.yaw])

    @classmethod
    def from_array(cls, row) -> Box3D:
        return cls(*(float(v) for v in row))


@dataclass(frozen=True)
class Detection:
    box: Box3D
    label: str
    score: float


# --------------------------------------------------------------------------
# geometry

def bev_corners(box) -> np.ndarray:
    """Counter-clockwise ground-plane corners, shape (4, 2)."""
    x, y, _, w, l, _, yaw = np.asarray(box, dtype=np.float64)[:7]
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) * 0.5
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip(subject: list, a, b) -> list:
    """Keep the part of ``subject`` left of the directed line a->b."""
    out = []
    if not subject:
        return out
    ex, ey = b[0] - a[0], b[1] - a[1]

    def side(p):
        return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

    prev = subject[-1]
    s_prev = side(prev)
    for cur in subject:
        s_cur = side(cur)
        if s_cur >= 0:
            if s_prev < 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif s_prev >= 0:
            t = s_prev / (s_prev - s_cur)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev, s_prev = cur, s_cur
    return out


def _intersection_area(ca: np.ndarray, cb: np.ndarray) -> float:
    poly = [tuple(p) for p in ca]
    for i in range(4):
        poly = _clip(poly, cb[i], cb[(i + 1) % 4])
        if not poly:
            return 0.0
    return max(_polygon_area(np.array(poly)), 0.0)


def rotated_iou_bev(a, b) -> float:
    """Intersection over union of two yawed rectangles on the ground plane."""
    a = a.to_array() if isinstance(a, Box3D) else np.asarray(a, dtype=np.float64)
    b = b.to_array() if isinstance(b, Box3D) else np.asarray(b, dtype=np.float64)
    area_a, area_b = a[3] * a[4], b[3] * b[4]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    reach = 0.5 * (math.hypot(a[3], a[4]) + math.hypot(b[3], b[4]))
    if math.hypot(a[0] - b[0], a[1] - b[1]) >= reach:
        return 0.0
    inter = _intersection_area(bev_corners(a), bev_corners(b))
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise BEV IoU; pairs whose bounding circles miss are skipped."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(a), len(b)))
    if len(a) == 0 or len(b) == 0:
        return out
    ra = 0.5 * np.hypot(a[:, 3], a[:, 4])
    rb = 0.5 * np.hypot(b[:, 3], b[:, 4])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    for i, j in zip(*np.nonzero(dist < ra[:, None] + rb[None, :])):
        out[i, j] = rotated_iou_bev(a[i], b[j])
    return out


def nms_bev(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy suppression in descending score order (ties: earlier first).

    A box is suppressed when its IoU with an already kept box exceeds the
    threshold.
    """
    if not dets:
        return []
    scores = np.array([d.score for d in dets])
    order = np.argsort(-scores, kind="stable")
    boxes = np.stack([d.box.to_array() for d in dets])
    suppressed = np.zeros(len(dets), dtype=bool)
    kept = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        kept.append(dets[i])
        rest = order[pos + 1:]
        rest = rest[~suppressed[rest]]
        if len(rest):
            ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
            suppressed[rest[ious > iou_threshold]] = True
    return kept


# --------------------------------------------------------------------------
# anchors

def _wrap_half_turn(angle):
    return np.mod(angle + math.pi / 2, math.pi) - math.pi / 2


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets turning ``anchors`` into ``boxes``.

    The yaw residual is taken modulo pi; the direction bin resolves the rest.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    return np.stack(
        [
            (boxes[:, 0] - anchors[:, 0]) / diag,
            (boxes[:, 1] - anchors[:, 1]) / diag,
            (boxes[:, 2] - anchors[:, 2]) / anchors[:, 5],
            np.log(boxes[:, 3] / anchors[:, 3]),
            np.log(boxes[:, 4] / anchors[:, 4]),
            np.log(boxes[:, 5] / anchors[:, 5]),
            _wrap_half_turn(boxes[:, 6] - anchors[:, 6]),
        ],
        axis=1,
    )


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, dir_bins: np.ndarray | None = None):
    """Apply regression deltas to anchors.

    Returns ``(boxes, index)`` where ``index`` lists the anchors that decoded
    to finite boxes; rows with non-finite deltas are dropped and logged.
    When ``dir_bins`` is given the yaw is flipped by pi wherever its bin
    disagrees with the predicted one.
    """
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    with np.errstate(over="ignore", invalid="ignore"):
        yaw = anchors[:, 6] + deltas[:, 6]
        if dir_bins is not None:
            flip = dir_bin(yaw) != np.asarray(dir_bins).reshape(-1)
            yaw = yaw + np.where(flip, math.pi, 0.0)
        boxes = np.stack(
            [
                anchors[:, 0] + deltas[:, 0] * diag,
                anchors[:, 1] + deltas[:, 1] * diag,
                anchors[:, 2] + deltas[:, 2] * anchors[:, 5],
                anchors[:, 3] * np.exp(deltas[:, 3]),
                anchors[:, 4] * np.exp(deltas[:, 4]),
                anchors[:, 5] * np.exp(deltas[:, 5]),
                normalize_yaw(yaw),
            ],
            axis=1,
        )
    ok = np.isfinite(deltas).all(axis=1) & np.isfinite(boxes).all(axis=1) & (boxes[:, 3:6] > 0).all(axis=1)
    dropped = int((~ok).sum())
    if dropped:
        logger.warning("dropped %d anchors with non-finite regression output", dropped)
    index = np.nonzero(ok)[0]
    return boxes[index], index


@dataclass(frozen=True)
class AnchorSet:
    boxes: np.ndarray  # (N, 7), cell-major: row, col, anchor
    classes: np.ndarray  # (N,) class index
    match_iou: np.ndarray
    unmatch_iou: np.ndarray
    per_cell: int

    def __len__(self) -> int:
        return len(self.boxes)


def make_anchors(cfg: ModelConfig, feat_h: int, feat_w: int) -> AnchorSet:
    grid = cfg.grid
    step_x = (grid.x_range[1] - grid.x_range[0]) / feat_w
    step_y = (grid.y_range[1] - grid.y_range[0]) / feat_h
    xs = grid.x_range[0] + (np.arange(feat_w) + 0.5) * step_x
    ys = grid.y_range[0] + (np.arange(feat_h) + 0.5) * step_y
    names = cfg.class_names
    templates, classes, match, unmatch = [], [], [], []
    for spec in cfg.anchors:
        for yaw in spec.yaws:
            templates.append([spec.z_center, spec.width, spec.length, spec.height, yaw])
            classes.append(names.index(spec.name))
            match.append(spec.match_iou)
            unmatch.append(spec.unmatch_iou)
    a = len(templates)
    tmpl = np.array(templates)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    boxes = np.empty((feat_h, feat_w, a, 7))
    boxes[..., 0] = xx[:, :, None]
    boxes[..., 1] = yy[:, :, None]
    boxes[..., 2:] = tmpl[None, None, :, :]
    reps = feat_h * feat_w
    return AnchorSet(
        boxes.reshape(-1, 7),
        np.tile(np.array(classes), reps),
        np.tile(np.array(match, dtype=np.float64), reps),
        np.tile(np.array(unmatch, dtype=np.float64), reps),
        a,
    )


@dataclass(frozen=True)
class AnchorTargets:
    labels: np.ndarray  # -1 ignore, 0 background, k + 1 for class k
    box_targets: np.ndarray  # (N, 7), zero except on positives
    dir_targets: np.ndarray  # (N,)
    matched_gt: np.ndarray  # (N,), -1 when unmatched

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(anchors: AnchorSet, gt_boxes: np.ndarray, gt_classes: Sequence[int]) -> AnchorTargets:
    """Match anchors to ground truth by same-class BEV IoU.

    Positive at IoU >= match threshold, negative below the unmatch
    threshold, ignored in between. Every ground-truth box also claims its
    best-overlapping anchor, even below the thresholds.
    """
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    labels = np.zeros(n, dtype=np.int64)
    box_targets = np.zeros((n, 7))
    dir_targets = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return AnchorTargets(labels, box_targets, dir_targets, matched)

    ious = iou_matrix(anchors.boxes, gt_boxes)
    ious[anchors.classes[:, None] != gt_classes[None, :]] = 0.0
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]

    pos = best_iou >= anchors.match_iou
    neg = best_iou < anchors.unmatch_iou
    matched[pos] = best_gt[pos]
    for g in range(len(gt_boxes)):
        col = ious[:, g]
        a = int(col.argmax())
        if col[a] > 0:
            pos[a] = True
            matched[a] = g
    labels[neg] = 0
    labels[~pos & ~neg] = -1
    labels[pos] = gt_classes[matched[pos]] + 1
    gt_for = gt_boxes[matched[pos]]
    box_targets[pos] = encode_boxes(gt_for, anchors.boxes[pos])
    dir_targets[pos] = dir_bin(gt_for[:, 6])
    return AnchorTargets(labels, box_targets, dir_targets, matched)

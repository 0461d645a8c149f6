"""Synthetic LiDAR-like scenes of yawed cars on a ground plane.

Randomness flows from one root seed: ``rng_streams(seed)`` splits a
``SeedSequence`` into named child generators so each consumer (scene layout,
weight init, benchmarking inputs) draws from its own stream.
"""

from __future__ import annotations

import math

import numpy as np

from .boxes import Box3D
from .config import GridSpec, toy_config
from .pillars import PointCloud

__all__ = ["rng_streams", "synth_scene", "points_in_footprint", "STREAMS"]

STREAMS = ("scene", "init", "bench")

CAR_DIMS = (1.6, 3.9, 1.56)  # w, l, h
CAR_Z = -1.78
POINTS_PER_BOX = 200
CLUTTER_POINTS = 1500


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(child) for name, child in zip(STREAMS, children)}


def points_in_footprint(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Mask of points whose (x, y) lies strictly inside the box's footprint."""
    dx = points[:, 0] - box.x
    dy = points[:, 1] - box.y
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    along = dx * c + dy * s
    across = -dx * s + dy * c
    return (np.abs(along) < box.l / 2) & (np.abs(across) < box.w / 2)


def _surface_points(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    # visible faces: four sides and the roof, sampled by area
    w, l, h = box.w, box.l, box.h
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    inset = rng.uniform(0.0, 0.05, n)
    local = np.zeros((n, 3))
    for f, (ax_u, ax_v) in enumerate([(l, h), (l, h), (w, h), (w, h), (l, w)]):
        m = face == f
        if f < 2:  # long sides
            local[m, 0] = u[m] * ax_u
            local[m, 1] = (1 if f == 0 else -1) * (w / 2 - inset[m])
            local[m, 2] = v[m] * ax_v
        elif f < 4:  # front and back
            local[m, 0] = (1 if f == 2 else -1) * (l / 2 - inset[m])
            local[m, 1] = u[m] * ax_u
            local[m, 2] = v[m] * ax_v
        else:  # roof
            local[m, 0] = u[m] * (l - 0.1)
            local[m, 1] = v[m] * (w - 0.1)
            local[m, 2] = h / 2 - inset[m]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xyz = np.stack(
        [box.x + c * local[:, 0] - s * local[:, 1], box.y + s * local[:, 0] + c * local[:, 1], box.z + local[:, 2]],
        axis=1,
    )
    intensity = rng.uniform(0.4, 1.0, n)
    return np.column_stack([xyz, intensity])


def synth_scene(seed: int, n_boxes: int, grid: GridSpec | None = None) -> tuple[PointCloud, list[Box3D]]:
    """Place ``n_boxes`` non-overlapping cars inside ``grid`` and sample points.

    Each car gets ``POINTS_PER_BOX`` points on its sides and roof; the
    ground outside the cars carries uniform clutter.
    """
    if n_boxes < 1:
        raise ValueError("n_boxes must be >= 1")
    grid = toy_config().grid if grid is None else grid
    rng = rng_streams(seed)["scene"]
    (x0, x1), (y0, y1) = grid.x_range, grid.y_range
    w0, l0, h0 = CAR_DIMS
    margin = 0.5 * math.hypot(w0, l0) * 1.1 + 0.5
    if x1 - x0 <= 2 * margin or y1 - y0 <= 2 * margin:
        raise ValueError("grid too small to hold a car")

    boxes: list[Box3D] = []
    for _ in range(1000 * n_boxes):
        if len(boxes) == n_boxes:
            break
        scale = rng.uniform(0.95, 1.05, 3)
        cand = Box3D(
            x=float(rng.uniform(x0 + margin, x1 - margin)),
            y=float(rng.uniform(y0 + margin, y1 - margin)),
            z=CAR_Z + float(rng.uniform(-0.1, 0.1)),
            w=w0 * scale[0],
            l=l0 * scale[1],
            h=h0 * scale[2],
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )
        if all(math.hypot(cand.x - b.x, cand.y - b.y) > 2 * margin for b in boxes):
            boxes.append(cand)
    if len(boxes) < n_boxes:
        raise ValueError(f"could not place {n_boxes} non-overlapping boxes in the grid")

    parts = [_surface_points(b, POINTS_PER_BOX, rng) for b in boxes]
    ground_z = CAR_Z - h0 / 2
    clutter = np.column_stack(
        [
            rng.uniform(x0, x1, CLUTTER_POINTS),
            rng.uniform(y0, y1, CLUTTER_POINTS),
            ground_z + rng.normal(0.0, 0.03, CLUTTER_POINTS),
            rng.uniform(0.0, 0.3, CLUTTER_POINTS),
        ]
    )
    occluded = np.zeros(len(clutter), dtype=bool)
    for b in boxes:
        occluded |= points_in_footprint(clutter, b)
    parts.append(clutter[~occluded])
    return PointCloud(np.concatenate(parts, axis=0)), boxes


"""Pillar encoding: point cloud -> pillars -> per-pillar features -> BEV map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import GridSpec
from .tensor import Tensor, emit

__all__ = ["PointCloud", "PillarBatch", "pillarize", "pfn_forward", "scatter_to_bev", "POINT_FEATURES"]

POINT_FEATURES = 9


@dataclass(frozen=True)
class PointCloud:
    """``N x 4`` array of (x, y, z, intensity)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.isfinite(pts).all():
            bad = int(np.argwhere(~np.isfinite(pts))[0, 0])
            raise ValueError(f"non-finite coordinate at point {bad}")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class PillarBatch:
    features: np.ndarray  # (P, max_points, 9)
    coords: np.ndarray  # (P, 2) row, col
    counts: np.ndarray  # (P,)

    @property
    def num_pillars(self) -> int:
        return self.coords.shape[0]


def pillarize(pc: PointCloud | np.ndarray, grid: GridSpec) -> PillarBatch:
    """Bucket points into vertical pillars and build 9-d per-point features.

    Each kept point carries (x, y, z, intensity), its offset from the mean of
    the pillar's kept points, and its x/y offset from the pillar center.
    Overflowing points are dropped in input order; overflowing pillars are
    dropped starting from the smallest point count (ties: latest first seen).
    """
    pts = pc.points if isinstance(pc, PointCloud) else PointCloud(pc).points
    m = grid.max_points_per_pillar
    width, height = grid.width, grid.height
    empty = PillarBatch(
        np.zeros((0, m, POINT_FEATURES)), np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    )
    if len(pts) == 0:
        return empty

    (x0, x1), (y0, y1), (z0, z1) = grid.x_range, grid.y_range, grid.z_range
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inside = (x >= x0) & (x < x1) & (y >= y0) & (y < y1) & (z >= z0) & (z < z1)
    col = np.floor((x - x0) / grid.pillar_dx).astype(np.int64)
    row = np.floor((y - y0) / grid.pillar_dy).astype(np.int64)
    inside &= (col >= 0) & (col < width) & (row >= 0) & (row < height)
    pts, col, row = pts[inside], col[inside], row[inside]
    if len(pts) == 0:
        return empty

    cell = row * width + col
    uniq, first, inverse, totals = np.unique(cell, return_index=True, return_inverse=True, return_counts=True)
    # pillar ids in first-seen order
    seen_order = np.argsort(first, kind="stable")
    rank_of = np.empty_like(seen_order)
    rank_of[seen_order] = np.arange(len(seen_order))
    pillar_of_point = rank_of[inverse]
    totals = totals[seen_order]
    cells = uniq[seen_order]

    n_pillars = len(cells)
    if n_pillars > grid.max_pillars:
        by_count = np.lexsort((np.arange(n_pillars), -totals))
        keep = np.sort(by_count[: grid.max_pillars])
    else:
        keep = np.arange(n_pillars)
    new_id = np.full(n_pillars, -1)
    new_id[keep] = np.arange(len(keep))

    order = np.argsort(pillar_of_point, kind="stable")
    sorted_pid = pillar_of_point[order]
    starts = np.searchsorted(sorted_pid, np.arange(n_pillars))
    slot = np.empty(len(pts), dtype=np.int64)
    slot[order] = np.arange(len(pts)) - starts[sorted_pid]

    pid = new_id[pillar_of_point]
    sel = (pid >= 0) & (slot < m)
    pts, pid, slot = pts[sel], pid[sel], slot[sel]
    n_keep = len(keep)
    counts = np.bincount(pid, minlength=n_keep)

    centroid = np.zeros((n_keep, 3))
    for d in range(3):
        centroid[:, d] = np.bincount(pid, weights=pts[:, d], minlength=n_keep) / counts
    rows = cells[keep] // width
    cols = cells[keep] % width
    center_x = x0 + (cols + 0.5) * grid.pillar_dx
    center_y = y0 + (rows + 0.5) * grid.pillar_dy

    feats = np.zeros((n_keep, m, POINT_FEATURES))
    feats[pid, slot, 0:4] = pts
    feats[pid, slot, 4:7] = pts[:, :3] - centroid[pid]
    feats[pid, slot, 7] = pts[:, 0] - center_x[pid]
    feats[pid, slot, 8] = pts[:, 1] - center_y[pid]
    coords = np.stack([rows, cols], axis=1).astype(np.int64)
    return PillarBatch(feats, coords, counts.astype(np.int64))


def pfn_forward(batch: PillarBatch, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-point linear + ReLU, then channel-wise max over each pillar's points."""
    c0, d = weight.shape
    if d != POINT_FEATURES or batch.features.shape[-1] != POINT_FEATURES:
        raise ValueError(f"pillar features must be {POINT_FEATURES}-dimensional")
    p, m, _ = batch.features.shape
    dtype = weight.dtype
    if p == 0:
        return emit(np.zeros((0, c0), dtype=dtype), (weight, bias), lambda g: (np.zeros_like(weight.data), np.zeros_like(bias.data)))
    if (batch.counts < 1).any():
        raise ValueError("pillar with zero points inside a non-empty batch")
    feats = batch.features.astype(dtype, copy=False)
    z = feats @ weight.data.T + bias.data  # (P, M, C0)
    valid = np.arange(m)[None, :] < batch.counts[:, None]
    masked = np.where(valid[:, :, None], z, -np.inf)
    idx = masked.argmax(axis=1)  # (P, C0)
    top = np.take_along_axis(z, idx[:, None, :], axis=1)[:, 0, :]
    out = np.maximum(top, 0).astype(dtype)

    def backward(g):
        gz = g * (top > 0)
        chosen = feats[np.arange(p)[:, None], idx]  # (P, C0, D)
        return np.einsum("pc,pcd->cd", gz, chosen), gz.sum(axis=0)

    return emit(out, (weight, bias), backward)


def scatter_to_bev(feats: Tensor, coords: np.ndarray, grid: GridSpec) -> Tensor:
    """Place pillar features on a ``(1, C0, H, W)`` grid; empty cells are zero."""
    p, c0 = feats.shape
    h, w = grid.height, grid.width
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if coords.shape[0] != p:
        raise ValueError(f"{p} feature rows but {coords.shape[0]} coordinates")
    rows, cols = coords[:, 0], coords[:, 1]
    if p and ((rows < 0).any() or (rows >= h).any() or (cols < 0).any() or (cols >= w).any()):
        raise ValueError(f"pillar coordinate outside the {h}x{w} grid")
    if len(np.unique(rows * w + cols)) != p:
        raise ValueError("duplicate pillar coordinates")
    out = np.zeros((1, c0, h, w), dtype=feats.dtype)
    out[0, :, rows, cols] = feats.data

    def backward(g):
        return (g[0, :, rows, cols].reshape(p, c0),)

    return emit(out, (feats,), backward)

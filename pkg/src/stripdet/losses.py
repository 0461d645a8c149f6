"""Detection losses: focal classification, smooth-L1 regression, direction CE."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, emit, scale

__all__ = ["anchor_rows", "focal_loss", "smooth_l1", "direction_loss", "total_loss"]


def anchor_rows(x: Tensor, per_anchor: int) -> Tensor:
    """Rearrange a ``(B, A*n, H, W)`` head map into ``(B*H*W*A, n)`` rows.

    Row order is batch, row, column, anchor, matching :func:`make_anchors`.
    """
    b, ch, h, w = x.shape
    if ch % per_anchor:
        raise ValueError(f"{ch} channels is not a multiple of {per_anchor}")
    a = ch // per_anchor
    out = x.data.reshape(b, a, per_anchor, h, w).transpose(0, 3, 4, 1, 2).reshape(-1, per_anchor)

    def backward(g):
        return (g.reshape(b, h, w, a, per_anchor).transpose(0, 3, 4, 1, 2).reshape(b, ch, h, w),)

    return emit(np.ascontiguousarray(out), (x,), backward)


def _softplus(z):
    return np.logaddexp(0.0, z)


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    weights: np.ndarray | None = None,
    normalizer: float | None = None,
) -> Tensor:
    """Sigmoid focal loss summed over anchor-class entries.

    ``targets`` holds 0/1 per entry; ``weights`` (per anchor) zeroes out
    ignored anchors. The sum is divided by the number of anchors with a
    positive entry (at least 1) unless ``normalizer`` is given.
    """
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype).reshape(x.shape)
    wts = np.ones(x.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype)
    if normalizer is None:
        normalizer = max(float((t.max(axis=1) > 0).sum()) if t.size else 0.0, 1.0)
    sign = 2.0 * t - 1.0
    z = sign * x  # logit of p_t
    log_q = -_softplus(-z)
    q = np.exp(log_q)
    alpha_t = np.where(t > 0, alpha, 1.0 - alpha)
    mod = (1.0 - q) ** gamma
    w2 = wts[:, None] / normalizer
    loss = float((-alpha_t * mod * log_q * w2).sum())

    def backward(g):
        dz = alpha_t * mod * (gamma * q * log_q - (1.0 - q))
        return (g * dz * sign * w2,)

    return emit(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Huber-style loss averaged over the elements of masked rows."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    p = pred.data
    d = p - np.asarray(target, dtype=p.dtype).reshape(p.shape)
    rows = np.ones(p.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(rows.sum()) * (p.shape[1] if p.ndim > 1 else 1)
    if count == 0:
        return emit(np.asarray(0.0, dtype=p.dtype), (pred,), lambda g: (np.zeros_like(p),))
    m = rows.reshape((-1,) + (1,) * (p.ndim - 1)).astype(p.dtype)
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    loss = float((per * m).sum() / count)

    def backward(g):
        grad = np.where(quad, d / beta, np.sign(d))
        return (g * grad * m / count,)

    return emit(np.asarray(loss, dtype=p.dtype), (pred,), backward)


def direction_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Softmax cross-entropy over direction bins, averaged over masked rows."""
    x = logits.data
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = np.ones(x.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(rows.sum())
    if count == 0:
        return emit(np.asarray(0.0, dtype=x.dtype), (logits,), lambda g: (np.zeros_like(x),))
    shifted = x - x.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    picked = log_p[np.arange(len(x)), labels]
    loss = float(-(picked * rows).sum() / count)

    def backward(g):
        grad = np.exp(log_p)
        grad[np.arange(len(x)), labels] -= 1.0
        return (g * grad * rows[:, None] / count,)

    return emit(np.asarray(loss, dtype=x.dtype), (logits,), backward)


def total_loss(cls, bbox, dir_ce, weights=(1.0, 2.0, 0.2)) -> Tensor:
    """Weighted sum of the classification, box and direction terms."""
    terms = [t if isinstance(t, Tensor) else Tensor(float(t)) for t in (cls, bbox, dir_ce)]
    w_cls, w_bbox, w_dir = weights
    return add(add(scale(terms[0], w_cls), scale(terms[1], w_bbox)), scale(terms[2], w_dir))

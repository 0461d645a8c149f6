"""Primitive neural operators with forward and backward rules.

Feature maps are rank-4 ``(batch, channels, height, width)`` tensors. Every
operator here is a single taped primitive, so each one can be certified on
its own with :func:`stripdet.tensor.gradcheck`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, emit

__all__ = [
    "ConvSpec",
    "ConvParams",
    "conv2d",
    "linear",
    "gelu",
    "relu",
    "layernorm",
    "sigmoid",
    "upsample_nearest",
    "concat_channels",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups {self.groups}"
            )
        if min(self.kernel_h, self.kernel_w, self.stride) < 1 or min(self.pad_h, self.pad_w) < 0:
            raise ValueError(f"invalid kernel/stride/padding in {self}")

    @classmethod
    def standard(cls, cin: int, cout: int, k: int, stride: int = 1) -> ConvSpec:
        return cls(cin, cout, k, k, stride, (k - 1) // 2, (k - 1) // 2, 1)

    @classmethod
    def depthwise(cls, channels: int, kh: int, kw: int, stride: int = 1) -> ConvSpec:
        # pads only along axes with extent > 1 so strips keep their shape
        return cls(channels, channels, kh, kw, stride, (kh - 1) // 2, (kw - 1) // 2, channels)

    @classmethod
    def pointwise(cls, cin: int, cout: int) -> ConvSpec:
        return cls(cin, cout, 1, 1)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    @property
    def is_pointwise(self) -> bool:
        return self.kernel_h == self.kernel_w == 1 and self.groups == 1

    @property
    def is_strip(self) -> bool:
        return self.is_depthwise and (self.kernel_h == 1) != (self.kernel_w == 1)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * self.pad_h - self.kernel_h) // self.stride + 1,
            (w + 2 * self.pad_w - self.kernel_w) // self.stride + 1,
        )


@dataclass(frozen=True)
class ConvParams:
    weight: Tensor
    bias: Tensor | None = None

    def check(self, spec: ConvSpec) -> None:
        if self.weight.shape != spec.weight_shape:
            raise ValueError(f"weight shape {self.weight.shape} does not match {spec.weight_shape}")
        if self.bias is not None and self.bias.shape != (spec.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} does not match ({spec.out_channels},)")


# --------------------------------------------------------------------------
# convolution kernels on raw arrays

def _windows(spec: ConvSpec, ho: int, wo: int):
    s = spec.stride
    for u in range(spec.kernel_h):
        for v in range(spec.kernel_w):
            yield u, v, (slice(u, u + s * (ho - 1) + 1, s), slice(v, v + s * (wo - 1) + 1, s))


def _dense_fwd(xp, w, spec, ho, wo):
    b, c = xp.shape[:2]
    out = np.zeros((b, w.shape[0], ho * wo), dtype=xp.dtype)
    taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
    for u, v, (sh, sw) in _windows(spec, ho, wo):
        xs = xp[:, :, sh, sw].reshape(b, c, ho * wo)
        out += np.matmul(taps[u, v], xs)
    return out.reshape(b, w.shape[0], ho, wo)


def _dense_bwd(xp, w, g, spec, ho, wo):
    b, c = xp.shape[:2]
    o = w.shape[0]
    g2 = g.reshape(b, o, ho * wo)
    dxp = np.zeros_like(xp)
    dtaps = np.empty((w.shape[2], w.shape[3], o, c), dtype=w.dtype)
    taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for u, v, (sh, sw) in _windows(spec, ho, wo):
        xs = xp[:, :, sh, sw].reshape(b, c, ho * wo)
        dtaps[u, v] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
        dxp[:, :, sh, sw] += np.matmul(taps_t[u, v], g2).reshape(b, c, ho, wo)
    return dxp, dtaps.transpose(2, 3, 0, 1).copy()


def _depthwise_fwd(xp, w, spec, ho, wo):
    b, c = xp.shape[:2]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    for u, v, (sh, sw) in _windows(spec, ho, wo):
        out += w[:, 0, u, v][None, :, None, None] * xp[:, :, sh, sw]
    return out


def _depthwise_bwd(xp, w, g, spec, ho, wo):
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for u, v, (sh, sw) in _windows(spec, ho, wo):
        dw[:, 0, u, v] = (g * xp[:, :, sh, sw]).sum(axis=(0, 2, 3))
        dxp[:, :, sh, sw] += w[:, 0, u, v][None, :, None, None] * g
    return dxp, dw


def _grouped_fwd(xp, w, spec, ho, wo):
    g_in = spec.in_channels // spec.groups
    g_out = spec.out_channels // spec.groups
    parts = [
        _dense_fwd(xp[:, k * g_in:(k + 1) * g_in], w[k * g_out:(k + 1) * g_out], spec, ho, wo)
        for k in range(spec.groups)
    ]
    return np.concatenate(parts, axis=1)


def _grouped_bwd(xp, w, g, spec, ho, wo):
    g_in = spec.in_channels // spec.groups
    g_out = spec.out_channels // spec.groups
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for k in range(spec.groups):
        ci, co = slice(k * g_in, (k + 1) * g_in), slice(k * g_out, (k + 1) * g_out)
        dxp[:, ci], dw[co] = _dense_bwd(xp[:, ci], w[co], g[:, co], spec, ho, wo)
    return dxp, dw


def conv2d(x: Tensor, spec: ConvSpec, params: ConvParams) -> Tensor:
    """Zero-padded grouped 2D cross-correlation.

    Covers standard, depthwise, pointwise and strip (1xK / Kx1) forms.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects a rank-4 input, got shape {x.shape}")
    b, c, h, w_ = x.shape
    if c != spec.in_channels:
        raise ValueError(f"channel mismatch: input has {c}, conv expects {spec.in_channels}")
    params.check(spec)
    hp, wp = h + 2 * spec.pad_h, w_ + 2 * spec.pad_w
    if spec.kernel_h > hp or spec.kernel_w > wp:
        raise ValueError(
            f"kernel {spec.kernel_h}x{spec.kernel_w} larger than padded input {hp}x{wp}"
        )
    ho, wo = spec.output_hw(h, w_)
    xp = np.pad(x.data, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    wd = params.weight.data
    if spec.groups == 1:
        fwd, bwd = _dense_fwd, _dense_bwd
    elif spec.is_depthwise:
        fwd, bwd = _depthwise_fwd, _depthwise_bwd
    else:
        fwd, bwd = _grouped_fwd, _grouped_bwd
    out = fwd(xp, wd, spec, ho, wo)
    if params.bias is not None:
        out += params.bias.data[None, :, None, None]

    def backward(g):
        dxp, dw = bwd(xp, wd, g, spec, ho, wo)
        dx = dxp[:, :, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + w_]
        db = g.sum(axis=(0, 2, 3)) if params.bias is not None else None
        return dx, dw, db

    inputs = (x, params.weight) + ((params.bias,) if params.bias is not None else ())
    return emit(out, inputs, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-pixel channel projection with an ``(out, in)`` weight matrix."""
    b, c, h, w = x.shape
    o, i = weight.shape
    if c != i:
        raise ValueError(f"channel mismatch: input has {c}, linear expects {i}")
    xr = x.data.reshape(b, c, h * w)
    wd = weight.data
    out = np.matmul(wd, xr)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(b, o, h, w)

    def backward(g):
        g2 = g.reshape(b, o, h * w)
        dx = np.matmul(wd.T, g2).reshape(b, c, h, w)
        dw = np.matmul(g2, xr.transpose(0, 2, 1)).sum(axis=0)
        db = g2.sum(axis=(0, 2)) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return emit(out, inputs, backward)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return emit((xd * cdf).astype(xd.dtype, copy=False), (x,), backward)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return emit(np.where(mask, xd, 0).astype(xd.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(xd.dtype)
    return emit(s, (x,), lambda g: (g * s * (1.0 - s),))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each pixel's channel vector, then apply per-channel affine."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},)")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data[None, :, None, None]
    out = xhat * gd + beta.data[None, :, None, None]

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return emit(out, (x, gamma, beta), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return x
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return emit(out, (x,), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts):
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(
                f"part {i} has shape {p.shape}, incompatible with part 0 shape {ref}"
            )
    if len(parts) == 1:
        return parts[0]
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)
    return emit(out, tuple(parts), lambda g: tuple(np.split(g, bounds, axis=1)))

"""Strip Attention Module (SAM) and Strip Attention Block (SAB).

SAM builds a spatial attention map from a 3x3 depthwise conv followed by a
horizontal 1xK and a vertical Kx1 depthwise strip, mixes channels with a
pointwise conv, and gates a GeLU-activated projection of its input with it.
SAB wraps SAM in two residual sub-blocks::

    F1  = F  + SAM(GeLU(Linear(F)))
    out = F1 + Conv3x3(LayerNorm(F1))
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .ops import ConvParams, ConvSpec, conv2d, gelu, layernorm, linear
from .tensor import Tensor, add, mul

__all__ = ["SAMParams", "SABParams", "sam_forward", "sab_forward", "sab_param_shapes", "strip_specs"]

LN_EPS = 1e-5


def strip_specs(channels: int, k: int) -> tuple[ConvSpec, ConvSpec, ConvSpec]:
    """The depthwise 3x3, 1xK and Kx1 convolutions that feed the attention map."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"strip length K must be odd and positive, got {k}")
    return (
        ConvSpec.depthwise(channels, 3, 3),
        ConvSpec.depthwise(channels, 1, k),
        ConvSpec.depthwise(channels, k, 1),
    )


@dataclass(frozen=True)
class SAMParams:
    dw3x3: ConvParams
    dw_1xK: ConvParams
    dw_Kx1: ConvParams
    pw: ConvParams
    proj_weight: Tensor
    proj_bias: Tensor | None

    @property
    def channels(self) -> int:
        return self.pw.weight.shape[0]

    @property
    def k(self) -> int:
        return self.dw_1xK.weight.shape[3]

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str) -> SAMParams:
        def conv(name):
            return ConvParams(store[f"{prefix}.{name}.weight"], store.get(f"{prefix}.{name}.bias"))

        return cls(
            conv("dw3x3"), conv("dw_1xK"), conv("dw_Kx1"), conv("pw"),
            store[f"{prefix}.proj.weight"], store.get(f"{prefix}.proj.bias"),
        )


@dataclass(frozen=True)
class SABParams:
    pre_weight: Tensor
    pre_bias: Tensor | None
    sam: SAMParams
    ln_gamma: Tensor
    ln_beta: Tensor
    conv3x3: ConvParams

    @classmethod
    def from_store(cls, store: Mapping[str, Tensor], prefix: str) -> SABParams:
        return cls(
            store[f"{prefix}.pre.weight"],
            store.get(f"{prefix}.pre.bias"),
            SAMParams.from_store(store, f"{prefix}.sam"),
            store[f"{prefix}.ln.gamma"],
            store[f"{prefix}.ln.beta"],
            ConvParams(store[f"{prefix}.conv3x3.weight"], store.get(f"{prefix}.conv3x3.bias")),
        )


def sab_param_shapes(channels: int, k: int, bias: bool = True) -> dict[str, tuple[int, ...]]:
    """Relative parameter names and shapes of one SAB."""
    c = channels
    dw3, dw_h, dw_v = strip_specs(c, k)
    shapes: dict[str, tuple[int, ...]] = {"pre.weight": (c, c)}
    if bias:
        shapes["pre.bias"] = (c,)
    for name, spec in (
        ("sam.dw3x3", dw3),
        ("sam.dw_1xK", dw_h),
        ("sam.dw_Kx1", dw_v),
        ("sam.pw", ConvSpec.pointwise(c, c)),
    ):
        shapes[f"{name}.weight"] = spec.weight_shape
        if bias:
            shapes[f"{name}.bias"] = (c,)
    shapes["sam.proj.weight"] = (c, c)
    if bias:
        shapes["sam.proj.bias"] = (c,)
    shapes["ln.gamma"] = (c,)
    shapes["ln.beta"] = (c,)
    shapes["conv3x3.weight"] = ConvSpec.standard(c, c, 3).weight_shape
    if bias:
        shapes["conv3x3.bias"] = (c,)
    return shapes


def _check_channels(x: Tensor, c: int) -> None:
    if x.shape[1] != c:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, block expects {c}")


def sam_forward(f0: Tensor, p: SAMParams) -> Tensor:
    c = p.channels
    _check_channels(f0, c)
    dw3, dw_h, dw_v = strip_specs(c, p.k)
    fp = conv2d(f0, dw3, p.dw3x3)
    fh = conv2d(fp, dw_h, p.dw_1xK)
    fv = conv2d(fh, dw_v, p.dw_Kx1)
    attn = conv2d(fv, ConvSpec.pointwise(c, c), p.pw)
    return mul(gelu(linear(f0, p.proj_weight, p.proj_bias)), attn)


def sab_forward(f: Tensor, p: SABParams) -> Tensor:
    c = p.sam.channels
    _check_channels(f, c)
    f1 = add(f, sam_forward(gelu(linear(f, p.pre_weight, p.pre_bias)), p.sam))
    normed = layernorm(f1, p.ln_gamma, p.ln_beta, LN_EPS)
    return add(f1, conv2d(normed, ConvSpec.standard(c, c, 3), p.conv3x3))

"""Finite-difference certification of every differentiable primitive.

Each case builds a scalar function of one tensor from a seeded generator.
Scalarisation uses a fixed random weighting rather than a plain sum, so
outputs whose plain sum is constant (LayerNorm, softmax) still exercise the
full Jacobian.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses, ops
from .config import AnchorSpec, GridSpec, ModelConfig
from .model import downsample, head_forward, init_params
from .ops import ConvParams, ConvSpec
from .pillars import pfn_forward, pillarize, scatter_to_bev
from .strip import SABParams, SAMParams, sab_forward, sab_param_shapes, sam_forward
from .tensor import Tensor, add, gradcheck, mul, scale, tsum, weighted_sum

__all__ = ["CASES", "run_suite", "CaseResult", "TOLERANCE"]

TOLERANCE = 1e-5
SHAPE = (1, 8, 6, 6)

Builder = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], Tensor]]


def _t(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape))


def _reduce(rng, shape):
    w = rng.normal(size=shape)
    return lambda y: weighted_sum(y, w)


def _conv_case(spec: ConvSpec, wrt: str, shape=SHAPE) -> Builder:
    def build(rng):
        x = _t(rng, shape)
        w = _t(rng, spec.weight_shape)
        b = _t(rng, (spec.out_channels,))
        ho, wo = spec.output_hw(shape[2], shape[3])
        red = _reduce(rng, (shape[0], spec.out_channels, ho, wo))
        if wrt == "x":
            return (lambda v: red(ops.conv2d(v, spec, ConvParams(w, b)))), x
        if wrt == "w":
            return (lambda v: red(ops.conv2d(x, spec, ConvParams(v, b)))), w
        return (lambda v: red(ops.conv2d(x, spec, ConvParams(w, v)))), b

    return build


def _unary(fn, lo=-2.0, hi=2.0) -> Builder:
    def build(rng):
        x = _t(rng, SHAPE, lo, hi)
        red = _reduce(rng, SHAPE)
        return (lambda v: red(fn(v))), x

    return build


def _sab_store(rng, c, k):
    return {f"b.{name}": _t(rng, shape, -0.5, 0.5) for name, shape in sab_param_shapes(c, k).items()}


def _sab_case(wrt: str) -> Builder:
    def build(rng):
        c, k = SHAPE[1], 3
        store = _sab_store(rng, c, k)
        store["b.ln.gamma"] = Tensor(1.0 + 0.1 * rng.normal(size=c))
        x = _t(rng, SHAPE)
        red = _reduce(rng, SHAPE)
        if wrt == "x":
            return (lambda v: red(sab_forward(v, SABParams.from_store(store, "b")))), x

        def f(v):
            s = dict(store)
            s[f"b.{wrt}"] = v
            return red(sab_forward(x, SABParams.from_store(s, "b")))

        return f, store[f"b.{wrt}"]

    return build


def _sam_case(rng):
    c, k = SHAPE[1], 5
    params = SAMParams.from_store(_sab_store(rng, c, k), "b.sam")
    x = _t(rng, SHAPE)
    red = _reduce(rng, SHAPE)
    return (lambda v: red(sam_forward(v, params))), x


def _layernorm_case(wrt):
    def build(rng):
        x = _t(rng, SHAPE, -2, 2)
        g = Tensor(rng.uniform(0.5, 1.5, SHAPE[1]))
        b = _t(rng, (SHAPE[1],))
        red = _reduce(rng, SHAPE)
        if wrt == "x":
            return (lambda v: red(ops.layernorm(v, g, b))), x
        if wrt == "gamma":
            return (lambda v: red(ops.layernorm(x, v, b))), g
        return (lambda v: red(ops.layernorm(x, g, v))), b

    return build


def _linear_case(wrt):
    def build(rng):
        x = _t(rng, SHAPE)
        w = _t(rng, (5, SHAPE[1]))
        b = _t(rng, (5,))
        red = _reduce(rng, (1, 5) + SHAPE[2:])
        if wrt == "x":
            return (lambda v: red(ops.linear(v, w, b))), x
        if wrt == "w":
            return (lambda v: red(ops.linear(x, v, b))), w
        return (lambda v: red(ops.linear(x, w, v))), b

    return build


def _binary(fn):
    def build(rng):
        x, y = _t(rng, SHAPE), _t(rng, SHAPE)
        red = _reduce(rng, SHAPE)
        return (lambda v: red(fn(v, y))), x

    return build


def _concat_case(rng):
    x = _t(rng, SHAPE)
    y = _t(rng, (1, 3) + SHAPE[2:])
    red = _reduce(rng, (1, SHAPE[1] + 3) + SHAPE[2:])
    return (lambda v: red(ops.concat_channels([y, v]))), x


def _upsample_case(rng):
    x = _t(rng, SHAPE)
    red = _reduce(rng, (1, SHAPE[1], SHAPE[2] * 2, SHAPE[3] * 2))
    return (lambda v: red(ops.upsample_nearest(v, 2))), x


def _downsample_case(rng):
    dw = ConvParams(_t(rng, (8, 1, 3, 3)), _t(rng, (8,)))
    pw = ConvParams(_t(rng, (12, 8, 1, 1)), _t(rng, (12,)))
    x = _t(rng, SHAPE)
    red = _reduce(rng, (1, 12, 3, 3))
    return (lambda v: red(downsample(v, 8, 12, dw, pw))), x


def _small_cfg() -> ModelConfig:
    grid = GridSpec(x_range=(0.0, 2.56), y_range=(-1.28, 1.28), pillar_dx=0.16, pillar_dy=0.16, max_points_per_pillar=4)
    return ModelConfig(
        c0=8, stage_channels=(4, 4, 4), stage_depths=(1, 1, 1), k=3, head_channels=4, grid=grid,
        anchors=(AnchorSpec("Car", 1.6, 3.9, 1.56, -1.78), AnchorSpec("Cyclist", 0.6, 1.76, 1.73, -0.6)),
    )


def _head_case(rng):
    cfg = _small_cfg()
    params = {k: Tensor(v.data.astype(np.float64)) for k, v in init_params(cfg, rng, np.float64).items()}
    x = _t(rng, (1, cfg.fused_channels, 4, 4))
    reds = None

    def f(v):
        nonlocal reds
        maps = head_forward(v, cfg, params)
        if reds is None:
            reds = [rng.normal(size=m.shape) for m in maps]
        total = weighted_sum(maps[0], reds[0])
        for m, r in zip(maps[1:], reds[1:]):
            total = add(total, weighted_sum(m, r))
        return total

    f(x)
    return f, x


def _pfn_case(wrt):
    def build(rng):
        grid = GridSpec(x_range=(0.0, 1.28), y_range=(0.0, 1.28), pillar_dx=0.32, pillar_dy=0.32, max_points_per_pillar=6)
        pts = np.column_stack([rng.uniform(0, 1.28, (40, 2)), rng.uniform(-2, 0, 40), rng.uniform(0, 1, 40)])
        batch = pillarize(pts, grid)
        w = _t(rng, (6, 9))
        b = _t(rng, (6,), -0.2, 0.2)
        red = _reduce(rng, (batch.num_pillars, 6))
        if wrt == "w":
            return (lambda v: red(pfn_forward(batch, v, b))), w
        return (lambda v: red(pfn_forward(batch, w, v))), b

    return build


def _scatter_case(rng):
    grid = GridSpec(x_range=(0.0, 0.96), y_range=(0.0, 0.96), pillar_dx=0.16, pillar_dy=0.16)
    cells = rng.choice(36, size=7, replace=False)
    coords = np.column_stack([cells // 6, cells % 6])
    x = _t(rng, (7, 5))
    red = _reduce(rng, (1, 5, 6, 6))
    return (lambda v: red(scatter_to_bev(v, coords, grid))), x


def _anchor_rows_case(rng):
    x = _t(rng, (1, 14, 3, 4))
    red = _reduce(rng, (24, 7))
    return (lambda v: red(losses.anchor_rows(v, 7))), x


def _focal_case(rng):
    x = _t(rng, (30, 3), -3, 3)
    t = (rng.uniform(size=(30, 3)) < 0.2).astype(float)
    w = (rng.uniform(size=30) < 0.9).astype(float)
    return (lambda v: losses.focal_loss(v, t, 0.25, 2.0, weights=w)), x


def _smooth_l1_case(rng):
    x = _t(rng, (20, 7), -3, 3)
    t = _t(rng, (20, 7), -3, 3).data
    mask = rng.uniform(size=20) < 0.6
    return (lambda v: losses.smooth_l1(v, t, 1.0, mask=mask)), x


def _direction_case(rng):
    x = _t(rng, (20, 2), -3, 3)
    labels = rng.integers(0, 2, 20)
    mask = rng.uniform(size=20) < 0.6
    return (lambda v: losses.direction_loss(v, labels, mask)), x


def _total_case(rng):
    x = _t(rng, (3,))
    return (lambda v: losses.total_loss(_pick(v, 0), _pick(v, 1), _pick(v, 2))), x


def _pick(v: Tensor, i: int) -> Tensor:
    w = np.zeros(v.shape)
    w[i] = 1.0
    return weighted_sum(v, w)


CASES: dict[str, Builder] = {
    "sum": lambda rng: (tsum, _t(rng, SHAPE)),
    "add": _binary(add),
    "mul": _binary(mul),
    "scale": _unary(lambda v: scale(v, -1.7)),
    "conv2d.standard.x": _conv_case(ConvSpec.standard(8, 6, 3), "x"),
    "conv2d.standard.w": _conv_case(ConvSpec.standard(8, 6, 3), "w"),
    "conv2d.standard.b": _conv_case(ConvSpec.standard(8, 6, 3), "b"),
    "conv2d.stride2.x": _conv_case(ConvSpec.standard(8, 4, 3, stride=2), "x"),
    "conv2d.depthwise.x": _conv_case(ConvSpec.depthwise(8, 3, 3), "x"),
    "conv2d.depthwise.w": _conv_case(ConvSpec.depthwise(8, 3, 3), "w"),
    "conv2d.depthwise_s2.x": _conv_case(ConvSpec.depthwise(8, 3, 3, stride=2), "x"),
    "conv2d.strip_1xK.x": _conv_case(ConvSpec.depthwise(8, 1, 5), "x"),
    "conv2d.strip_1xK.w": _conv_case(ConvSpec.depthwise(8, 1, 5), "w"),
    "conv2d.strip_Kx1.x": _conv_case(ConvSpec.depthwise(8, 5, 1), "x"),
    "conv2d.strip_Kx1.w": _conv_case(ConvSpec.depthwise(8, 5, 1), "w"),
    "conv2d.pointwise.x": _conv_case(ConvSpec.pointwise(8, 5), "x"),
    "conv2d.pointwise.w": _conv_case(ConvSpec.pointwise(8, 5), "w"),
    "conv2d.grouped.x": _conv_case(ConvSpec(8, 4, 3, 3, 1, 1, 1, 2), "x"),
    "conv2d.grouped.w": _conv_case(ConvSpec(8, 4, 3, 3, 1, 1, 1, 2), "w"),
    "linear.x": _linear_case("x"),
    "linear.w": _linear_case("w"),
    "linear.b": _linear_case("b"),
    "gelu": _unary(ops.gelu),
    "relu": _unary(ops.relu),
    "sigmoid": _unary(ops.sigmoid, -4, 4),
    "layernorm.x": _layernorm_case("x"),
    "layernorm.gamma": _layernorm_case("gamma"),
    "layernorm.beta": _layernorm_case("beta"),
    "upsample_nearest": _upsample_case,
    "concat_channels": _concat_case,
    "downsample": _downsample_case,
    "sam": _sam_case,
    "sab.x": _sab_case("x"),
    "sab.dw_1xK": _sab_case("sam.dw_1xK.weight"),
    "sab.proj": _sab_case("sam.proj.weight"),
    "sab.ln_gamma": _sab_case("ln.gamma"),
    "head": _head_case,
    "pfn.w": _pfn_case("w"),
    "pfn.b": _pfn_case("b"),
    "scatter_to_bev": _scatter_case,
    "anchor_rows": _anchor_rows_case,
    "focal_loss": _focal_case,
    "smooth_l1": _smooth_l1_case,
    "direction_loss": _direction_case,
    "total_loss": _total_case,
}


@dataclass(frozen=True)
class CaseResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def run_suite(seeds=(0,), names=None, report=None) -> list[CaseResult]:
    results = []
    for seed in seeds:
        for name, build in CASES.items():
            if names is not None and name not in names:
                continue
            rng = np.random.default_rng([seed, _stable_hash(name)])
            f, x = build(rng)
            res = CaseResult(name, seed, gradcheck(f, x))
            results.append(res)
            if report is not None:
                report(res)
    return results


def _stable_hash(name: str) -> int:
    h = 0
    for ch in name.encode():
        h = (h * 131 + ch) % (2**31)
    return h


def timed_suite(seeds) -> tuple[list[CaseResult], float]:
    t0 = time.perf_counter()
    res = run_suite(seeds)
    return res, time.perf_counter() - t0

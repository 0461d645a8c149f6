"""Static parameter and multiply-accumulate accounting.

Counts are derived from closed forms over a :class:`ModelConfig`, not from
instantiated weights, so they serve as an independent check on the model.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import ModelConfig

__all__ = [
    "LayerStats",
    "CostReport",
    "ScalingReport",
    "count_params",
    "count_macs",
    "analyze",
    "scaling_study",
    "format_table",
    "report_csv",
    "TARGET_PARAMS",
    "TARGET_FLOPS",
]

# budget the reference config is sized against
TARGET_PARAMS = 0.65e6
TARGET_FLOPS = 9.5e9
POINT_FEATURES = 9


@dataclass(frozen=True)
class LayerStats:
    name: str
    params: int
    macs: int = 0


@dataclass
class CostReport:
    layers: list[LayerStats]
    minor_flops: int = 0
    bev_hw: tuple[int, int] = (0, 0)

    @property
    def params(self) -> int:
        return sum(s.params for s in self.layers)

    @property
    def macs(self) -> int:
        return sum(s.macs for s in self.layers)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def headline(self, target: float = TARGET_FLOPS) -> tuple[str, int]:
        """The convention (MACs or FLOPs = 2*MACs) closest to ``target``."""
        options = [("MACs", self.macs), ("FLOPs=2*MACs", self.flops)]
        return min(options, key=lambda kv: abs(math.log(max(kv[1], 1) / target)))


def _conv(name, cin, cout, kh, kw, groups=1, out_hw=(0, 0), bias=True) -> LayerStats:
    per_out = (cin // groups) * kh * kw
    params = cout * per_out + (cout if bias else 0)
    return LayerStats(name, params, out_hw[0] * out_hw[1] * cout * per_out)


def _half(n: int) -> int:
    return (n + 1) // 2


def _sab_layers(prefix: str, c: int, k: int, hw: tuple[int, int], bias: bool) -> list[LayerStats]:
    return [
        _conv(f"{prefix}.pre", c, c, 1, 1, 1, hw, bias),
        _conv(f"{prefix}.sam.dw3x3", c, c, 3, 3, c, hw, bias),
        _conv(f"{prefix}.sam.dw_1xK", c, c, 1, k, c, hw, bias),
        _conv(f"{prefix}.sam.dw_Kx1", c, c, k, 1, c, hw, bias),
        _conv(f"{prefix}.sam.pw", c, c, 1, 1, 1, hw, bias),
        _conv(f"{prefix}.sam.proj", c, c, 1, 1, 1, hw, bias),
        LayerStats(f"{prefix}.ln", 2 * c, 0),
        _conv(f"{prefix}.conv3x3", c, c, 3, 3, 1, hw, bias),
    ]


# elementwise passes per SAB: 2x GeLU, gating product, 2 residual adds, LayerNorm
_SAB_MINOR_PASSES = 6


def analyze(cfg: ModelConfig, bev_h: int | None = None, bev_w: int | None = None, pillars: int | None = None) -> CostReport:
    """Per-layer parameters and MACs at a given BEV resolution.

    The pillar encoder is costed at ``pillars`` occupied pillars, by default
    the grid's capacity.
    """
    bev_h = cfg.grid.height if bev_h is None else bev_h
    bev_w = cfg.grid.width if bev_w is None else bev_w
    if bev_h % 8 or bev_w % 8:
        raise ValueError(f"BEV dims {bev_h}x{bev_w} must be divisible by 8")
    bias = cfg.conv_bias
    pillars = cfg.grid.max_pillars if pillars is None else pillars
    m = cfg.grid.max_points_per_pillar
    layers = [LayerStats("pfn", cfg.c0 * POINT_FEATURES + cfg.c0, pillars * m * POINT_FEATURES * cfg.c0)]
    minor = pillars * m * cfg.c0

    h, w, cin = bev_h, bev_w, cfg.c0
    for s, (c, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
        h, w = _half(h), _half(w)
        pre = f"backbone.stage{s}"
        layers.append(_conv(f"{pre}.down.dw", cin, cin, 3, 3, cin, (h, w), bias))
        layers.append(_conv(f"{pre}.down.pw", cin, c, 1, 1, 1, (h, w), bias))
        for j in range(depth):
            layers.extend(_sab_layers(f"{pre}.block{j}", c, cfg.k, (h, w), bias))
            minor += _SAB_MINOR_PASSES * c * h * w
        cin = c

    fh, fw = _half(bev_h), _half(bev_w)
    a = sum(len(spec.yaws) for spec in cfg.anchors)
    n_cls = len({spec.name for spec in cfg.anchors})
    for branch, n_out in (("cls", a * n_cls), ("box", a * 7), ("dir", a * 2)):
        layers.append(_conv(f"head.{branch}.conv", sum(cfg.stage_channels), cfg.head_channels, 3, 3, 1, (fh, fw), bias))
        layers.append(_conv(f"head.{branch}.out", cfg.head_channels, n_out, 1, 1, 1, (fh, fw), bias))
    return CostReport(layers, minor, (bev_h, bev_w))


def count_params(cfg: ModelConfig) -> list[LayerStats]:
    return [LayerStats(s.name, s.params, 0) for s in analyze(cfg).layers]


def count_macs(cfg: ModelConfig, bev_h: int, bev_w: int) -> list[LayerStats]:
    return analyze(cfg, bev_h, bev_w).layers


# --------------------------------------------------------------------------
# kernel-size scaling

@dataclass
class ScalingReport:
    ks: list[int]
    strip_params: list[int]
    full_params: list[int]
    strip_macs: list[int]
    full_macs: list[int]
    exponents: dict[str, float] = field(default_factory=dict)

    def rows(self) -> Iterable[tuple]:
        return zip(self.ks, self.strip_params, self.full_params, self.strip_macs, self.full_macs)


def _loglog_slope(ks: Sequence[int], costs: Sequence[int]) -> float:
    slope, _ = np.polyfit(np.log(ks), np.log(costs), 1)
    return float(slope)


def scaling_study(cfg: ModelConfig, ks: Sequence[int], bev_h: int | None = None, bev_w: int | None = None) -> ScalingReport:
    """Cost of every SAM's 1xK + Kx1 strip pair against a full KxK depthwise kernel.

    Totals are summed over all blocks of the model at their stage resolution,
    and growth exponents come from a least-squares fit of log cost on log K.
    """
    ks = [int(k) for k in ks]
    if len(ks) < 3:
        raise ValueError("scaling study needs at least three kernel sizes")
    if any(k < 1 or k % 2 == 0 for k in ks):
        raise ValueError(f"kernel sizes must be odd, got {ks}")
    bev_h = cfg.grid.height if bev_h is None else bev_h
    bev_w = cfg.grid.width if bev_w is None else bev_w
    blocks = []
    h, w = bev_h, bev_w
    for c, depth in zip(cfg.stage_channels, cfg.stage_depths):
        h, w = _half(h), _half(w)
        blocks.extend([(c, h, w)] * depth)
    bias = cfg.conv_bias
    rep = ScalingReport(ks, [], [], [], [])
    for k in ks:
        sp = fp = sm = fm = 0
        for c, h, w in blocks:
            a = _conv("h", c, c, 1, k, c, (h, w), bias)
            b = _conv("v", c, c, k, 1, c, (h, w), bias)
            full = _conv("f", c, c, k, k, c, (h, w), bias)
            sp += a.params + b.params
            sm += a.macs + b.macs
            fp += full.params
            fm += full.macs
        rep.strip_params.append(sp)
        rep.full_params.append(fp)
        rep.strip_macs.append(sm)
        rep.full_macs.append(fm)
    rep.exponents = {
        "strip_params": _loglog_slope(ks, rep.strip_params),
        "full_params": _loglog_slope(ks, rep.full_params),
        "strip_macs": _loglog_slope(ks, rep.strip_macs),
        "full_macs": _loglog_slope(ks, rep.full_macs),
    }
    return rep


# --------------------------------------------------------------------------
# rendering

def format_table(report: CostReport) -> str:
    width = max(len(s.name) for s in report.layers)
    lines = [f"{'layer':<{width}}  {'params':>10}  {'MACs':>14}"]
    for s in report.layers:
        lines.append(f"{s.name:<{width}}  {s.params:>10d}  {s.macs:>14d}")
    convention, value = report.headline()
    h, w = report.bev_hw
    lines += [
        "",
        f"total params: {report.params} ({report.params / 1e6:.3f}M; target 0.65M)",
        f"total MACs: {report.macs} ({report.macs / 1e9:.3f}G) at BEV {h}x{w}",
        f"total FLOPs (2*MACs): {report.flops} ({report.flops / 1e9:.3f}G)",
        f"minor elementwise FLOPs (excluded): {report.minor_flops}",
        f"headline convention: {convention} = {value / 1e9:.3f}G (target 9.5G, "
        f"{100 * (value / TARGET_FLOPS - 1):+.1f}%)",
    ]
    return "\n".join(lines)


def report_csv(report: CostReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "params", "macs"])
    for s in report.layers:
        writer.writerow([s.name, s.params, s.macs])
    return buf.getvalue()


def format_scaling(rep: ScalingReport) -> str:
    lines = [f"{'K':>4}  {'strip params':>13}  {'full params':>12}  {'strip MACs':>14}  {'full MACs':>14}  {'ratio':>6}"]
    for k, sp, fp, sm, fm in rep.rows():
        lines.append(f"{k:>4}  {sp:>13d}  {fp:>12d}  {sm:>14d}  {fm:>14d}  {fp / sp:>6.2f}")
    lines.append("")
    for key, val in rep.exponents.items():
        lines.append(f"growth exponent {key}: {val:.4f}")
    return "\n".join(lines)

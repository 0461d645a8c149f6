"""Full detector: pillar encoder, SAB backbone, three-branch head, inference."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .boxes import Box3D, Detection, decode_boxes, make_anchors, nms_bev
from .config import ModelConfig
from .losses import anchor_rows
from .ops import ConvParams, ConvSpec, concat_channels, conv2d, upsample_nearest
from .pillars import POINT_FEATURES, PointCloud, pfn_forward, pillarize, scatter_to_bev
from .strip import SABParams, sab_forward, sab_param_shapes
from .tensor import Tensor

__all__ = [
    "param_shapes",
    "init_params",
    "encode_bev",
    "downsample",
    "backbone_forward",
    "head_forward",
    "forward",
    "predict",
    "HEAD_BRANCHES",
]

Params = Mapping[str, Tensor]

# prior probability used to initialise the classification bias
CLS_PRIOR = 0.01


def head_outputs(cfg: ModelConfig) -> dict[str, int]:
    a = cfg.anchors_per_cell
    return {"cls": a * cfg.num_classes, "box": a * 7, "dir": a * 2}


HEAD_BRANCHES = ("cls", "box", "dir")


def downsample_specs(in_ch: int, out_ch: int) -> tuple[ConvSpec, ConvSpec]:
    return ConvSpec.depthwise(in_ch, 3, 3, stride=2), ConvSpec.pointwise(in_ch, out_ch)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered names and shapes of every learned tensor."""
    bias = cfg.conv_bias
    shapes: dict[str, tuple[int, ...]] = {
        "pfn.weight": (cfg.c0, POINT_FEATURES),
        "pfn.bias": (cfg.c0,),
    }

    def conv(name, spec):
        shapes[f"{name}.weight"] = spec.weight_shape
        if bias:
            shapes[f"{name}.bias"] = (spec.out_channels,)

    cin = cfg.c0
    for s, (ch, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
        dw, pw = downsample_specs(cin, ch)
        conv(f"backbone.stage{s}.down.dw", dw)
        conv(f"backbone.stage{s}.down.pw", pw)
        for j in range(depth):
            for rel, shape in sab_param_shapes(ch, cfg.k, bias).items():
                shapes[f"backbone.stage{s}.block{j}.{rel}"] = shape
        cin = ch
    for branch, n_out in head_outputs(cfg).items():
        conv(f"head.{branch}.conv", ConvSpec.standard(cfg.fused_channels, cfg.head_channels, 3))
        conv(f"head.{branch}.out", ConvSpec.pointwise(cfg.head_channels, n_out))
    return shapes


def init_params(cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Uniform fan-in initialisation; LayerNorm starts at the identity."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shapes = param_shapes(cfg)
    params: dict[str, Tensor] = {}
    for name, shape in shapes.items():
        if name.endswith("ln.gamma"):
            arr = np.ones(shape)
        elif name.endswith("ln.beta"):
            arr = np.zeros(shape)
        else:
            wshape = shapes[name[: -len("bias")] + "weight"] if name.endswith(".bias") else shape
            fan_in = int(np.prod(wshape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    if "head.cls.out.bias" in params:
        prior = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)
        params["head.cls.out.bias"] = Tensor(np.full(shapes["head.cls.out.bias"], prior, dtype=dtype), requires_grad=True)
    return params


def _conv_params(params: Params, name: str) -> ConvParams:
    return ConvParams(params[f"{name}.weight"], params.get(f"{name}.bias"))


def encode_bev(pc: PointCloud, cfg: ModelConfig, params: Params) -> Tensor:
    batch = pillarize(pc, cfg.grid)
    feats = pfn_forward(batch, params["pfn.weight"], params["pfn.bias"])
    return scatter_to_bev(feats, batch.coords, cfg.grid)


def downsample(x: Tensor, in_ch: int, out_ch: int, dw: ConvParams, pw: ConvParams) -> Tensor:
    """Depthwise 3x3 stride-2 followed by a pointwise projection."""
    if x.shape[1] != in_ch:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, downsample expects {in_ch}")
    dw_spec, pw_spec = downsample_specs(in_ch, out_ch)
    return conv2d(conv2d(x, dw_spec, dw), pw_spec, pw)


def backbone_forward(bev: Tensor, cfg: ModelConfig, params: Params) -> Tensor:
    _, c, h, w = bev.shape
    if c != cfg.c0:
        raise ValueError(f"channel mismatch: BEV map has {c}, config expects {cfg.c0}")
    if h % 8 or w % 8:
        raise ValueError(f"BEV dims {h}x{w} must be divisible by 8")
    x, cin = bev, cfg.c0
    stage_outputs = []
    for s, (ch, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths)):
        x = downsample(
            x, cin, ch,
            _conv_params(params, f"backbone.stage{s}.down.dw"),
            _conv_params(params, f"backbone.stage{s}.down.pw"),
        )
        for j in range(depth):
            x = sab_forward(x, SABParams.from_store(params, f"backbone.stage{s}.block{j}"))
        stage_outputs.append(upsample_nearest(x, 2 ** s))
        cin = ch
    return concat_channels(stage_outputs)


def head_forward(feat: Tensor, cfg: ModelConfig, params: Params) -> tuple[Tensor, Tensor, Tensor]:
    if feat.shape[1] != cfg.fused_channels:
        raise ValueError(f"channel mismatch: features have {feat.shape[1]}, head expects {cfg.fused_channels}")
    outs = []
    for branch, n_out in head_outputs(cfg).items():
        hidden = conv2d(
            feat, ConvSpec.standard(cfg.fused_channels, cfg.head_channels, 3), _conv_params(params, f"head.{branch}.conv")
        )
        outs.append(conv2d(hidden, ConvSpec.pointwise(cfg.head_channels, n_out), _conv_params(params, f"head.{branch}.out")))
    return tuple(outs)


def forward(pc: PointCloud, cfg: ModelConfig, params: Params) -> tuple[Tensor, Tensor, Tensor]:
    bev = encode_bev(pc, cfg, params)
    return head_forward(backbone_forward(bev, cfg, params), cfg, params)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def detections_from_maps(cls_map: Tensor, box_map: Tensor, dir_map: Tensor, cfg: ModelConfig) -> list[Detection]:
    """Score, decode and suppress head outputs into final detections."""
    _, _, fh, fw = cls_map.shape
    anchors = make_anchors(cfg, fh, fw)
    cls_rows = anchor_rows(cls_map, cfg.num_classes).data.astype(np.float64)
    box_rows = anchor_rows(box_map, 7).data.astype(np.float64)
    dir_rows = anchor_rows(dir_map, 2).data
    probs = _sigmoid(cls_rows)
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(probs)), labels]
    cand = np.nonzero(scores >= cfg.score_threshold)[0]
    if len(cand) > cfg.pre_nms_top_k:
        cand = cand[np.argsort(-scores[cand], kind="stable")[: cfg.pre_nms_top_k]]
        cand.sort()
    boxes, kept = decode_boxes(box_rows[cand], anchors.boxes[cand], dir_rows[cand].argmax(axis=1))
    cand = cand[kept]
    names = cfg.class_names
    result: list[Detection] = []
    for k, name in enumerate(names):
        sel = np.nonzero(labels[cand] == k)[0]
        dets = [Detection(Box3D.from_array(boxes[i]), name, float(scores[cand[i]])) for i in sel]
        result.extend(nms_bev(dets, cfg.nms_iou_threshold))
    order = sorted(range(len(result)), key=lambda i: -result[i].score)
    return [result[i] for i in order]


def predict(pc: PointCloud, cfg: ModelConfig, params: Params) -> list[Detection]:
    return detections_from_maps(*forward(pc, cfg, params), cfg)

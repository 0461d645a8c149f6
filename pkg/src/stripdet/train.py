"""AdamW with a one-cycle schedule and the single-scene overfit run."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D, Detection, assign_targets, make_anchors, rotated_iou_bev
from .config import ModelConfig
from .io import TrainSettings
from .losses import anchor_rows, direction_loss, focal_loss, smooth_l1, total_loss
from .model import backbone_forward, detections_from_maps, head_forward, init_params
from .pillars import pfn_forward, pillarize, scatter_to_bev
from .synth import rng_streams, synth_scene
from .tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

__all__ = ["one_cycle_lr", "AdamW", "detection_losses", "train_toy", "ToyRun"]


def one_cycle_lr(step: int, total: int, s: TrainSettings) -> float:
    """Cosine warm-up to ``s.lr`` over ``pct_start`` of the run, then cosine decay."""
    start = s.lr / s.div_factor
    end = start / s.final_div_factor
    warm = max(1, int(round(s.pct_start * total)))
    if step < warm:
        t = step / warm
        return start + (s.lr - start) * (1 - math.cos(math.pi * t)) / 2
    t = (step - warm) / max(1, total - warm)
    return end + (s.lr - end) * (1 + math.cos(math.pi * min(t, 1.0))) / 2


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            data = p.data * (1 - lr * self.weight_decay) - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.params[name] = Tensor(data.astype(p.dtype), requires_grad=True)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * factor
    return norm


def detection_losses(maps, targets, cfg: ModelConfig):
    """Classification, box and direction loss terms for one scene."""
    cls_map, box_map, dir_map = maps
    n_cls = cfg.num_classes
    cls_rows = anchor_rows(cls_map, n_cls)
    onehot = np.zeros(cls_rows.shape, dtype=cls_rows.dtype)
    pos = targets.positive
    onehot[np.nonzero(pos)[0], targets.labels[pos] - 1] = 1.0
    normalizer = max(targets.num_positive, 1)
    l_cls = focal_loss(
        cls_rows, onehot, cfg.focal_alpha, cfg.focal_gamma,
        weights=(targets.labels >= 0).astype(np.float64), normalizer=normalizer,
    )
    l_box = smooth_l1(anchor_rows(box_map, 7), targets.box_targets, cfg.smooth_l1_beta, mask=pos)
    l_dir = direction_loss(anchor_rows(dir_map, 2), targets.dir_targets, mask=pos)
    return l_cls, l_box, l_dir


@dataclass
class ToyRun:
    losses: list[float]
    components: list[tuple[float, float, float]]
    params: dict[str, Tensor]
    gt_boxes: list[Box3D]
    detections: list[Detection] = field(default_factory=list)

    def matches(self) -> list[float]:
        """Best detection IoU for each ground-truth box."""
        return [
            max((rotated_iou_bev(d.box, gt) for d in self.detections), default=0.0)
            for gt in self.gt_boxes
        ]


def train_toy(cfg: ModelConfig, settings: TrainSettings, seed: int = 0, log_every: int = 0, callback=None) -> ToyRun:
    """Overfit the detector on one synthetic scene.

    The scene and the weight initialisation draw from separate streams of
    the same root seed.
    """
    pc, gt = synth_scene(seed, settings.n_boxes, cfg.grid)
    params = init_params(cfg, rng_streams(seed)["init"], dtype=np.float32)
    batch = pillarize(pc, cfg.grid)
    fh, fw = cfg.grid.height // 2, cfg.grid.width // 2
    anchors = make_anchors(cfg, fh, fw)
    gt_arr = np.stack([b.to_array() for b in gt])
    car = cfg.class_names.index("Car")
    targets = assign_targets(anchors, gt_arr, [car] * len(gt))

    opt = AdamW(params, settings.betas, settings.eps, settings.weight_decay)
    losses, comps = [], []
    for step in range(settings.steps):
        with GradTape() as tape:
            feats = pfn_forward(batch, opt.params["pfn.weight"], opt.params["pfn.bias"])
            bev = scatter_to_bev(feats, batch.coords, cfg.grid)
            maps = head_forward(backbone_forward(bev, cfg, opt.params), cfg, opt.params)
            parts = detection_losses(maps, targets, cfg)
            loss = total_loss(*parts, weights=cfg.loss_weights)
        g = tape.backward(loss)
        grads = {k: g[v] for k, v in opt.params.items()}
        clip_grads(grads, settings.clip_norm)
        opt.step(grads, one_cycle_lr(step, settings.steps, settings))
        losses.append(loss.item())
        comps.append(tuple(p.item() for p in parts))
        if log_every and (step % log_every == 0 or step == settings.steps - 1):
            logger.info("step %d loss %.5f", step, losses[-1])
        if callback is not None:
            callback(step, losses[-1], comps[-1])

    feats = pfn_forward(batch, opt.params["pfn.weight"], opt.params["pfn.bias"])
    maps = head_forward(backbone_forward(scatter_to_bev(feats, batch.coords, cfg.grid), cfg, opt.params), cfg, opt.params)
    dets = detections_from_maps(*maps, cfg)
    return ToyRun(losses, comps, opt.params, gt, dets)

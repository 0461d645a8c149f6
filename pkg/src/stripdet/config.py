"""Architecture, grid and anchor configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

__all__ = ["GridSpec", "AnchorSpec", "ModelConfig", "DEFAULT_ANCHORS", "reference_config", "toy_config"]


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple[float, float] = (0.0, 69.12)
    y_range: tuple[float, float] = (-39.68, 39.68)
    z_range: tuple[float, float] = (-3.0, 1.0)
    pillar_dx: float = 0.16
    pillar_dy: float = 0.16
    max_points_per_pillar: int = 32
    max_pillars: int = 12000

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be non-empty, got {(lo, hi)}")
        if self.pillar_dx <= 0 or self.pillar_dy <= 0:
            raise ValueError("pillar sizes must be positive")
        for span, step, axis in (
            (self.x_range[1] - self.x_range[0], self.pillar_dx, "x"),
            (self.y_range[1] - self.y_range[0], self.pillar_dy, "y"),
        ):
            n = span / step
            if abs(n - round(n)) > 1e-6 * max(1.0, n):
                raise ValueError(f"{axis} span {span} is not a whole number of pillars of {step}")
        if self.max_points_per_pillar < 1 or self.max_pillars < 1:
            raise ValueError("pillar capacities must be >= 1")

    @property
    def width(self) -> int:
        return round((self.x_range[1] - self.x_range[0]) / self.pillar_dx)

    @property
    def height(self) -> int:
        return round((self.y_range[1] - self.y_range[0]) / self.pillar_dy)


@dataclass(frozen=True)
class AnchorSpec:
    name: str
    width: float
    length: float
    height: float
    z_center: float
    yaws: tuple[float, ...] = (0.0, math.pi / 2)
    match_iou: float = 0.6
    unmatch_iou: float = 0.45

    def __post_init__(self):
        if min(self.width, self.length, self.height) <= 0:
            raise ValueError(f"anchor {self.name} needs positive dimensions")
        if not 0 <= self.unmatch_iou < self.match_iou <= 1:
            raise ValueError(f"anchor {self.name} needs 0 <= unmatch_iou < match_iou <= 1")


DEFAULT_ANCHORS = (
    AnchorSpec("Car", 1.6, 3.9, 1.56, -1.78, match_iou=0.6, unmatch_iou=0.45),
    AnchorSpec("Pedestrian", 0.6, 0.8, 1.73, -0.6, match_iou=0.5, unmatch_iou=0.35),
    AnchorSpec("Cyclist", 0.6, 1.76, 1.73, -0.6, match_iou=0.5, unmatch_iou=0.35),
)


@dataclass(frozen=True)
class ModelConfig:
    c0: int = 64
    stage_channels: tuple[int, int, int] = (32, 64, 128)
    stage_depths: tuple[int, int, int] = (2, 2, 2)
    k: int = 7
    head_channels: int = 16
    grid: GridSpec = field(default_factory=GridSpec)
    anchors: tuple[AnchorSpec, ...] = DEFAULT_ANCHORS
    loss_weights: tuple[float, float, float] = (1.0, 2.0, 0.2)
    score_threshold: float = 0.3
    nms_iou_threshold: float = 0.1
    pre_nms_top_k: int = 1000
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    conv_bias: bool = True

    def __post_init__(self):
        if len(self.stage_channels) != 3 or len(self.stage_depths) != 3:
            raise ValueError("stage_channels and stage_depths need exactly three entries")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"k must be odd, got {self.k}")
        if min(self.stage_channels) < 1 or min(self.stage_depths) < 0 or self.c0 < 1:
            raise ValueError("channel counts must be positive and depths non-negative")
        if min(self.loss_weights) <= 0:
            raise ValueError("loss weights must be positive")
        if not self.anchors:
            raise ValueError("at least one anchor spec is required")

    @property
    def class_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for a in self.anchors:
            if a.name not in names:
                names.append(a.name)
        return tuple(names)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def anchors_per_cell(self) -> int:
        return sum(len(a.yaws) for a in self.anchors)

    @property
    def fused_channels(self) -> int:
        return sum(self.stage_channels)

    def with_(self, **changes) -> ModelConfig:
        return replace(self, **changes)


def reference_config() -> ModelConfig:
    """Shipped configuration, sized to a ~0.65M parameter budget."""
    return ModelConfig()


def toy_config() -> ModelConfig:
    """Small single-class model on a 128x128 grid used for the overfit run."""
    grid = GridSpec(
        x_range=(0.0, 20.48),
        y_range=(-10.24, 10.24),
        z_range=(-3.0, 1.0),
        max_points_per_pillar=32,
        max_pillars=6000,
    )
    return ModelConfig(
        c0=32,
        stage_channels=(16, 32, 32),
        stage_depths=(1, 1, 1),
        head_channels=16,
        grid=grid,
        anchors=(DEFAULT_ANCHORS[0],),
    )

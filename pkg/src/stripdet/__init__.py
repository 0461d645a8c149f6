"""Strip-attention pillar detector on a small NumPy autograd."""

from .analyzer import CostReport, LayerStats, ScalingReport, analyze, count_macs, count_params, scaling_study
from .boxes import Box3D, Detection, decode_boxes, encode_boxes, nms_bev, rotated_iou_bev
from .config import AnchorSpec, GridSpec, ModelConfig, reference_config, toy_config
from .io import load_weights, read_kitti_bin, save_weights
from .losses import direction_loss, focal_loss, smooth_l1, total_loss
from .model import backbone_forward, forward, head_forward, init_params, param_shapes, predict
from .ops import ConvParams, ConvSpec, conv2d, gelu, layernorm, linear
from .pillars import PillarBatch, PointCloud, pfn_forward, pillarize, scatter_to_bev
from .strip import SABParams, SAMParams, sab_forward, sam_forward
from .synth import synth_scene
from .tensor import GradTape, Tensor, backward, gradcheck, tensor_new

__version__ = "0.1.0"

__all__ = [
    "AnchorSpec", "Box3D", "ConvParams", "ConvSpec", "CostReport", "Detection", "GradTape", "GridSpec",
    "LayerStats", "ModelConfig", "PillarBatch", "PointCloud", "SABParams", "SAMParams", "ScalingReport",
    "Tensor", "analyze", "backbone_forward", "backward", "conv2d", "count_macs", "count_params",
    "decode_boxes", "direction_loss", "encode_boxes", "focal_loss", "forward", "gelu", "gradcheck",
    "head_forward", "init_params", "layernorm", "linear", "load_weights", "nms_bev", "param_shapes",
    "pfn_forward", "pillarize", "predict", "read_kitti_bin", "reference_config", "rotated_iou_bev",
    "sab_forward", "sam_forward", "save_weights", "scaling_study", "scatter_to_bev", "smooth_l1",
    "synth_scene", "tensor_new", "toy_config", "total_loss",
]

"""Learned point-cloud geometry codec with per-instance head adaptation."""

from .codec import CodecConfig, compute_bpp, decode, encode, joint_pmf, topk_reconstruct
from .container import BitstreamContainer, header_bits, rate_split
from .context_model import (
    Checkpoint,
    ContextModel,
    ModelConfig,
    TrainConfig,
    init_params,
    partition_checkerboard,
    train_ucm,
)
from .finetune import IaftConfig, TunedHeads, cache_backbone, decode_weights, encode_weights, finetune
from .geometry import PointCloud, VoxelPyramid, build_pyramid, from_voxels, o2v, v2o, voxelize

__all__ = [
    "BitstreamContainer",
    "Checkpoint",
    "CodecConfig",
    "ContextModel",
    "IaftConfig",
    "ModelConfig",
    "PointCloud",
    "TrainConfig",
    "TunedHeads",
    "VoxelPyramid",
    "build_pyramid",
    "cache_backbone",
    "compute_bpp",
    "decode",
    "decode_weights",
    "encode",
    "encode_weights",
    "finetune",
    "from_voxels",
    "header_bits",
    "init_params",
    "joint_pmf",
    "o2v",
    "partition_checkerboard",
    "rate_split",
    "topk_reconstruct",
    "train_ucm",
    "v2o",
    "voxelize",
]

__version__ = "0.1.0"

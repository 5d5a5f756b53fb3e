"""Gated sparse convolution for memory-matching video object segmentation."""

from .estimator import VideoObjectSegmenter
from .gating import POLICY_COMPUTE, POLICY_REUSE, POLICY_SKIP
from .losses import LossConfig
from .pipeline import PipelineConfig, segment_video, train
from .synthdata import (
    SceneSpec,
    contour_accuracy_f,
    generate,
    region_similarity_j,
)
from .tensor import ConvSpec, Tensor, concat, conv2d_dense, softmax
from .validation import VideoSequence

__version__ = "0.1.0"

__all__ = [
    "ConvSpec",
    "LossConfig",
    "PipelineConfig",
    "POLICY_COMPUTE",
    "POLICY_REUSE",
    "POLICY_SKIP",
    "SceneSpec",
    "Tensor",
    "VideoObjectSegmenter",
    "VideoSequence",
    "concat",
    "contour_accuracy_f",
    "conv2d_dense",
    "generate",
    "region_similarity_j",
    "segment_video",
    "softmax",
    "train",
]

"""sklearn-style estimator facade over the training/inference pipeline.

``fit`` trains on a list of video sequences, ``predict`` propagates the
first-frame mask through a new sequence, ``score`` reports mean region
similarity. Constructor arguments are stored verbatim and introspected by
``get_params``/``set_params``, so the estimator clones and grid-searches
like any other.
"""
from __future__ import annotations

import inspect
from typing import List, Optional, Sequence

import numpy as np

from .losses import LossConfig
from .pipeline import Model, PipelineConfig, segment_video, train
from .synthdata import region_similarity_j
from .validation import VideoSequence, check_video_sequence


class NotFittedError(RuntimeError):
    pass


class VideoObjectSegmenter:
    """Gated sparse video object segmentation with a fit/predict surface."""

    def __init__(
        self,
        variant: str = "triple",
        strategy: str = "mixed",
        iterations: int = 2000,
        sparse_target: float = 0.1,
        gamma: float = 1.0,
        beta: float = 1.0,
        tau: float = 1.0,
        memory_interval: int = 5,
        sparsify_memory_encoder: bool = False,
        seed: int = 0,
        lr_peak: float = 2e-3,
        weight_decay: float = 0.05,
        dtype: str = "float64",
        stage_channels=(8, 16, 32),
        key_channels: int = 8,
        value_channels: int = 32,
    ):
        self.variant = variant
        self.strategy = strategy
        self.iterations = iterations
        self.sparse_target = sparse_target
        self.gamma = gamma
        self.beta = beta
        self.tau = tau
        self.memory_interval = memory_interval
        self.sparsify_memory_encoder = sparsify_memory_encoder
        self.seed = seed
        self.lr_peak = lr_peak
        self.weight_decay = weight_decay
        self.dtype = dtype
        self.stage_channels = stage_channels
        self.key_channels = key_channels
        self.value_channels = value_channels

    @classmethod
    def _param_names(cls) -> List[str]:
        sig = inspect.signature(cls.__init__)
        return [p for p in sig.parameters if p != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "VideoObjectSegmenter":
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(
                    f"invalid parameter {key!r} for {type(self).__name__}; "
                    f"valid parameters are {sorted(valid)}"
                )
            setattr(self, key, value)
        return self

    def _pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            stage_channels=tuple(self.stage_channels),
            key_channels=self.key_channels,
            value_channels=self.value_channels,
            variant=self.variant,
            strategy=self.strategy,
            sparsify_memory_encoder=self.sparsify_memory_encoder,
            memory_interval=self.memory_interval,
            tau=self.tau,
            seed=self.seed,
            iterations=self.iterations,
            lr_peak=self.lr_peak,
            weight_decay=self.weight_decay,
            dtype=self.dtype,
        )

    def _loss_config(self) -> LossConfig:
        return LossConfig(
            gamma=self.gamma, beta=self.beta, sparse_target=self.sparse_target
        )

    def fit(self, sequences: Sequence[VideoSequence], y=None) -> "VideoObjectSegmenter":
        sequences = list(sequences)
        for seq in sequences:
            check_video_sequence(seq)
        self.model_, self.log_ = train(
            sequences, self._pipeline_config(), self._loss_config()
        )
        return self

    def _check_fitted(self) -> Model:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict/score")
        return self.model_

    def predict(self, sequence: VideoSequence, return_report: bool = False):
        model = self._check_fitted()
        masks, report = segment_video(model, sequence, self._pipeline_config())
        self.last_report_ = report
        if return_report:
            return masks, report
        return masks

    def score(self, sequences: Sequence[VideoSequence], y=None) -> float:
        """Mean region similarity over all predicted frames with ground truth."""
        model = self._check_fitted()
        scores = []
        for seq in sequences:
            masks, _ = segment_video(model, seq, self._pipeline_config())
            for i in range(1, len(masks)):
                if seq.gt_masks[i] is not None:
                    scores.append(region_similarity_j(masks[i], seq.gt_masks[i]))
        if not scores:
            raise ValueError("no frames with ground truth to score against")
        return float(np.mean(scores))

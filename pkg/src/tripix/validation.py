"""Input validation helpers shared by the pipeline, estimator and CLI."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .tensor import Tensor, as_array


@dataclass
class VideoSequence:
    """Frames (3, H, W in [0, 1]) plus ground-truth masks (H, W in {0, 1}).

    The first mask is mandatory (it seeds the memory); later masks are
    optional and only used for metrics or training.
    """

    frames: List[Tensor]
    gt_masks: List[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def resolution(self):
        return self.frames[0].shape[1:]

    def __len__(self) -> int:
        return len(self.frames)


def check_frame(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ValueError(f"frame must be (3, H, W), got shape {t.shape}")
    t.check_finite()
    return t


def check_binary_mask(m, shape=None) -> np.ndarray:
    arr = np.asarray(as_array(m))
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"mask shape {arr.shape} != expected {tuple(shape)}")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"mask values must be 0/1, got {vals[:8]}")
    return arr.astype(np.uint8)


def check_divisible(h: int, w: int, by: int = 16) -> None:
    if h % by or w % by:
        raise ValueError(f"resolution {h}x{w} must be divisible by {by}")


def check_video_sequence(seq: VideoSequence, divisible_by: int = 16) -> VideoSequence:
    """Validate uniform resolution, divisibility and the mandatory first mask."""
    if not seq.frames:
        raise ValueError("sequence has no frames")
    first = check_frame(seq.frames[0])
    h, w = first.shape[1:]
    check_divisible(h, w, divisible_by)
    for i, f in enumerate(seq.frames):
        t = check_frame(f)
        if t.shape[1:] != (h, w):
            raise ValueError(
                f"resolution change mid-sequence at frame {i}: "
                f"{t.shape[1:]} != {(h, w)}"
            )
    if len(seq.gt_masks) != len(seq.frames):
        raise ValueError(
            f"gt_masks has {len(seq.gt_masks)} entries for {len(seq.frames)} frames"
        )
    if seq.gt_masks[0] is None:
        raise ValueError("the first frame's ground-truth mask is mandatory")
    for i, m in enumerate(seq.gt_masks):
        if m is not None:
            check_binary_mask(m, (h, w))
    return seq

"""Synthetic moving-shapes video plus segmentation metrics.

Scenes hold one labeled object and any number of unlabeled distractors
moving over a textured background. Rasterization is exact, so ground-truth
masks are exact; frames are quantized to the 8-bit grid so that PPM export
and re-import are lossless. Everything is deterministic given (spec, seed).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .tensor import Tensor
from .tensorio import read_pgm, read_ppm, write_pgm, write_ppm
from .validation import VideoSequence, check_binary_mask

SHAPES = ("disk", "square", "triangle")


@dataclass
class ObjectSpec:
    shape: str
    color: Tuple[float, float, float]
    size: float
    center: Tuple[float, float]  # (y, x) at frame 0
    velocity: Tuple[float, float] = (0.0, 0.0)  # (dy, dx) per frame
    deform_amp: float = 0.0  # relative size oscillation amplitude
    deform_period: float = 8.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}, want one of {SHAPES}")
        if self.size <= 0:
            raise ValueError("object size must be positive")

    def center_at(self, t: int) -> Tuple[float, float]:
        return (
            self.center[0] + t * self.velocity[0],
            self.center[1] + t * self.velocity[1],
        )

    def size_at(self, t: int) -> float:
        if self.deform_amp == 0.0:
            return self.size
        return self.size * (1.0 + self.deform_amp * math.sin(2 * math.pi * t / self.deform_period))


@dataclass
class SceneSpec:
    resolution: int = 64  # square frames, multiple of 16
    frames: int = 24
    objects: List[ObjectSpec] = field(default_factory=list)  # exactly one, labeled
    distractors: List[ObjectSpec] = field(default_factory=list)
    background_seed: int = 0
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.resolution % 16:
            raise ValueError(f"resolution {self.resolution} must be divisible by 16")
        if self.frames < 1:
            raise ValueError("need at least one frame")


def validate_scene(spec: SceneSpec) -> SceneSpec:
    """Reject specs whose labeled object ever leaves the frame."""
    if len(spec.objects) != 1:
        raise ValueError("scene must have exactly one labeled object")
    obj = spec.objects[0]
    lim = spec.resolution - 1
    for t in range(spec.frames):
        cy, cx = obj.center_at(t)
        bound = obj.size_at(t) + 1.0
        if cy - bound < 0 or cx - bound < 0 or cy + bound > lim or cx + bound > lim:
            raise ValueError(
                f"labeled object leaves the frame at t={t} "
                f"(center=({cy:.1f},{cx:.1f}), extent={bound:.1f})"
            )
    return spec


def rasterize(shape: str, cy: float, cx: float, size: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    if shape == "square":
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= size
    if shape == "triangle":
        verts = [(cy - size, cx), (cy + size, cx - size), (cy + size, cx + size)]
        signs = []
        for (y0, x0), (y1, x1) in zip(verts, verts[1:] + verts[:1]):
            signs.append((x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0))
        pos = np.logical_and.reduce([s >= 0 for s in signs])
        neg = np.logical_and.reduce([s <= 0 for s in signs])
        return pos | neg
    raise ValueError(f"unknown shape {shape!r}")


def _mean3(img: np.ndarray) -> np.ndarray:
    """3x3 box blur with edge clamping, per channel."""
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return out / 9.0


def _background(res: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.15, 0.45, size=(3, max(res // 8, 1), max(res // 8, 1)))
    img = np.kron(coarse, np.ones((8, 8)))[:, :res, :res]
    return _mean3(_mean3(img))


def generate(spec: SceneSpec, seed: int) -> VideoSequence:
    """Render the scene: frames in [0, 1] on the 8-bit grid, exact gt masks."""
    validate_scene(spec)
    rng = np.random.default_rng(seed)
    res = spec.resolution
    background = _background(res, spec.background_seed)
    frames: List[Tensor] = []
    masks: List[Optional[np.ndarray]] = []
    for t in range(spec.frames):
        img = background.copy()
        for d in spec.distractors:
            cy, cx = d.center_at(t)
            m = rasterize(d.shape, cy, cx, d.size_at(t), res, res)
            img[:, m] = np.asarray(d.color)[:, None]
        obj = spec.objects[0]
        cy, cx = obj.center_at(t)
        gt = rasterize(obj.shape, cy, cx, obj.size_at(t), res, res)
        img[:, gt] = np.asarray(obj.color)[:, None]
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
        frames.append(Tensor(img))
        masks.append(gt.astype(np.uint8))
    return VideoSequence(frames=frames, gt_masks=masks)


# ---------------------------------------------------------------------------
# presets


def preset_plain(resolution: int = 64, frames: int = 24, variation: int = 0) -> SceneSpec:
    """One moving labeled shape plus one differently colored distractor."""
    rng = np.random.default_rng(1000 + variation)
    res = resolution
    shape = SHAPES[variation % len(SHAPES)]
    size = float(rng.uniform(5.0, 8.0))
    margin = size + 3.0
    span = res - 1 - 2 * margin
    c0 = margin + rng.random(2) * span
    # velocity chosen so the object stays inside for all frames
    max_v = np.minimum(c0 - margin, margin + span - c0) / max(frames - 1, 1)
    vel = rng.uniform(-1.0, 1.0, 2) * np.minimum(max_v, 1.2)
    obj = ObjectSpec(
        shape=shape,
        color=tuple(rng.uniform(0.55, 0.95, 3)),
        size=size,
        center=(float(c0[0]), float(c0[1])),
        velocity=(float(vel[0]), float(vel[1])),
        deform_amp=float(rng.uniform(0.0, 0.08)),
    )
    d0 = margin + rng.random(2) * span
    dvel = rng.uniform(-1.0, 1.0, 2)
    distractor = ObjectSpec(
        shape=SHAPES[(variation + 1) % len(SHAPES)],
        color=tuple(rng.uniform(0.55, 0.95, 3)),
        size=float(rng.uniform(4.0, 7.0)),
        center=(float(d0[0]), float(d0[1])),
        velocity=(float(dvel[0]), float(dvel[1])),
    )
    return SceneSpec(
        resolution=res,
        frames=frames,
        objects=[obj],
        distractors=[distractor],
        background_seed=variation,
        noise_sigma=0.02,
    )


def preset_similar_objects(resolution: int = 64, frames: int = 24) -> SceneSpec:
    """Labeled disk and an identical distractor disk crossing paths.

    The rows are 15 px apart and both disks have radius 7, so at the crossing
    frame the edge gap is 1 px: the probe for confusing similar objects.
    """
    color = (0.85, 0.25, 0.25)
    r = 7.0
    x0, x1 = 14.0, 50.0
    step = (x1 - x0) / (frames - 1)
    obj = ObjectSpec("disk", color, r, center=(24.0, x0), velocity=(0.0, step))
    distractor = ObjectSpec("disk", color, r, center=(39.0, x1), velocity=(0.0, -step))
    return SceneSpec(
        resolution=resolution,
        frames=frames,
        objects=[obj],
        distractors=[distractor],
        background_seed=7,
        noise_sigma=0.02,
    )


def training_scenes(count: int = 8, resolution: int = 64, frames: int = 24) -> List[SceneSpec]:
    return [preset_plain(resolution, frames, variation=i) for i in range(count)]


# ---------------------------------------------------------------------------
# metrics


def region_similarity_j(pred, gt) -> float:
    """Intersection over union; two empty masks count as a perfect match."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one differing 4-neighbor (outside counts as 0)."""
    m = np.asarray(mask, dtype=bool)
    interior = np.ones_like(m)
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        interior &= _shift(m, dy, dx)
    return m & ~interior


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = np.zeros_like(mask)
    r = int(radius)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx <= radius * radius:
                out |= _shift(mask, dy, dx)
    return out


def contour_accuracy_f(pred, gt, tolerance_px: int = 1) -> float:
    """Boundary F-measure with a pixel tolerance via dilation."""
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    pb, gb = boundary(p), boundary(g)
    np_b, ng_b = pb.sum(), gb.sum()
    if np_b == 0 and ng_b == 0:
        return 1.0
    if np_b == 0 or ng_b == 0:
        return 0.0
    precision = (pb & _dilate(gb, tolerance_px)).sum() / np_b
    recall = (gb & _dilate(pb, tolerance_px)).sum() / ng_b
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


# ---------------------------------------------------------------------------
# sequence directories


def save_sequence(dirpath, seq: VideoSequence, force: bool = False) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    if not force and any(d.iterdir()):
        raise FileExistsError(f"{d} is not empty (use force to overwrite)")
    h, w = seq.resolution
    with open(d / "manifest.txt", "w") as f:
        f.write(f"frames={len(seq.frames)}\n")
        f.write(f"height={h}\n")
        f.write(f"width={w}\n")
    for i, frame in enumerate(seq.frames):
        img = np.round(frame.data * 255.0).astype(np.uint8)
        write_ppm(d / f"frame_{i:03d}.ppm", img)
        mask = seq.gt_masks[i] if i < len(seq.gt_masks) else None
        if mask is not None:
            write_pgm(d / f"mask_{i:03d}.pgm", mask.astype(np.uint8) * 255)


def load_sequence(dirpath) -> VideoSequence:
    d = Path(dirpath)
    manifest = {}
    for line in (d / "manifest.txt").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        manifest[key.strip()] = value.strip()
    n = int(manifest["frames"])
    frames: List[Tensor] = []
    masks: List[Optional[np.ndarray]] = []
    for i in range(n):
        img = read_ppm(d / f"frame_{i:03d}.ppm")
        frames.append(Tensor(img.astype(np.float64) / 255.0))
        mask_path = d / f"mask_{i:03d}.pgm"
        if mask_path.exists():
            masks.append(check_binary_mask(read_pgm(mask_path) // 255))
        else:
            masks.append(None)
    return VideoSequence(frames=frames, gt_masks=masks)


def list_sequence_dirs(root) -> List[Path]:
    root = Path(root)
    if (root / "manifest.txt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"no sequence directories under {root}")
    return dirs

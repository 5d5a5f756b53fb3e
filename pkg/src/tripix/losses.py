"""Training objective: segmentation loss plus sparsity constraints.

The sparsity terms penalise each layer's compute fraction when it leaves a
[t_lower, t_upper] band around the target, and the cost-weighted global
fraction when it misses the target. The band starts collapsed onto the
target and relaxes linearly to [0, 1] over the first part of training so
layers can specialise while the global budget stays pinned.

All loss functions build autograd nodes; plain numbers and arrays are
accepted and wrapped as constants, so the unit algebra can be checked on
floats directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .tensor import as_array


@dataclass
class LossConfig:
    gamma: float = 1.0  # weight of the whole sparsity term
    beta: float = 1.0  # weight of the global term inside it
    sparse_target: float = 0.1
    # bootstrap schedule: fraction of pixels kept goes 1.0 -> final between
    # the two iteration fractions
    bootstrap_start_frac: float = 0.2
    bootstrap_end_frac: float = 0.7
    bootstrap_final: float = 0.15
    relax_frac: float = 0.75  # bounds fully relaxed after this fraction of training

    def __post_init__(self):
        if not 0.0 <= self.sparse_target <= 1.0:
            raise ValueError(f"sparse_target must be in [0,1], got {self.sparse_target}")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be >= 0")


@dataclass
class ScheduleState:
    t_upper: float
    t_lower: float
    iteration: int
    total_iterations: int


def relax_bounds(
    state: ScheduleState, sparse_target: float, relax_frac: float = 0.75
) -> ScheduleState:
    """Band bounds at ``state.iteration``: start at the target, relax to [0, 1]."""
    if state.total_iterations <= 0:
        raise ValueError("total_iterations must be positive")
    rho = min(state.iteration / (relax_frac * state.total_iterations), 1.0)
    return ScheduleState(
        t_upper=sparse_target + (1.0 - sparse_target) * rho,
        t_lower=sparse_target * (1.0 - rho),
        iteration=state.iteration,
        total_iterations=state.total_iterations,
    )


def bootstrap_fraction(iteration: int, total_iterations: int, cfg: LossConfig) -> float:
    """Fraction of highest-loss pixels kept by the bootstrapped cross entropy."""
    start = cfg.bootstrap_start_frac * total_iterations
    end = cfg.bootstrap_end_frac * total_iterations
    if iteration <= start:
        return 1.0
    if iteration >= end:
        return cfg.bootstrap_final
    t = (iteration - start) / (end - start)
    return 1.0 + (cfg.bootstrap_final - 1.0) * t


def _as_node(x) -> ag.Node:
    if isinstance(x, ag.Node):
        return x
    return ag.constant(np.asarray(as_array(x), dtype=np.float64))


def _square(x: ag.Node) -> ag.Node:
    return ag.mul(x, x)


def bootstrapped_ce(pred_logits, gt_mask, top_fraction: float) -> ag.Node:
    """Mean cross entropy over the ceil(top_fraction * H * W) hardest pixels."""
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0,1], got {top_fraction}")
    logits = _as_node(pred_logits)
    gt = np.asarray(as_array(gt_mask))
    if logits.value.ndim != 3 or logits.value.shape[0] != 2:
        raise ValueError(f"logits must be (2, H, W), got {logits.value.shape}")
    if gt.shape != logits.value.shape[1:]:
        raise ValueError(
            f"mask shape {gt.shape} != logits spatial shape {logits.value.shape[1:]}"
        )
    onehot = np.stack([1.0 - gt, gt]).astype(logits.value.dtype)
    log_probs = ag.log(ag.softmax(logits, axis=0))
    per_pixel = ag.mul(ag.sum_(ag.mul(log_probs, ag.constant(onehot)), axis=0), -1.0)

    n = per_pixel.value.size
    keep = math.ceil(top_fraction * n)
    if keep >= n:
        selected = per_pixel
    else:
        flat = per_pixel.value.ravel()
        idx = np.argpartition(flat, n - keep)[n - keep :]
        sel = np.zeros(n, dtype=per_pixel.value.dtype)
        sel[idx] = 1.0
        selected = ag.mul(per_pixel, ag.constant(sel.reshape(per_pixel.value.shape)))
    return ag.mul(ag.sum_(selected), 1.0 / keep)


def layer_sparse_loss(s_k, state: ScheduleState) -> ag.Node:
    """Squared distance of one layer's compute fraction from the allowed band."""
    s = _as_node(s_k)
    over = ag.relu(ag.add(s, -float(state.t_upper)))
    under = ag.relu(ag.add(ag.mul(s, -1.0), float(state.t_lower)))
    return ag.add(_square(over), _square(under))


def global_sparse_loss(
    layer_fractions: Sequence[Tuple[object, float, float]], sparse_target: float
) -> ag.Node:
    """Squared miss of the cost-weighted compute fraction vs the target.

    ``layer_fractions`` holds (fraction, per-pixel cost, output area) per layer.
    """
    if not layer_fractions:
        raise ValueError("global_sparse_loss needs at least one layer")
    denom = 0.0
    num = None
    for frac, cost, area in layer_fractions:
        w = float(cost) * float(area)
        denom += w
        term = ag.mul(_as_node(frac), w)
        num = term if num is None else ag.add(num, term)
    ratio = ag.mul(num, 1.0 / denom)
    return _square(ag.add(ratio, -float(sparse_target)))


def total_loss(seg, layer_losses: List, global_loss, cfg: LossConfig) -> ag.Node:
    """seg + gamma * (sum of layer losses + beta * global loss)."""
    seg = _as_node(seg)
    sparse = None
    for ll in layer_losses:
        term = _as_node(ll)
        sparse = term if sparse is None else ag.add(sparse, term)
    g = ag.mul(_as_node(global_loss), cfg.beta)
    sparse = g if sparse is None else ag.add(sparse, g)
    return ag.add(seg, ag.mul(sparse, cfg.gamma))


def scalar(x) -> float:
    """Plain float from a Node or array-like scalar, for logging."""
    arr = np.asarray(x.value if isinstance(x, ag.Node) else x)
    if arr.size != 1:
        raise ValueError(f"expected a scalar, got shape {arr.shape}")
    return float(arr.reshape(()))

"""Policy-masked convolution via gather/compute/scatter.

Forward executes only the pixels the gate marked compute; reuse pixels are
copied from the cached previous output and skip pixels stay zero. The
training path expresses the same selection in the autograd graph with the
hard mask on the forward value and the soft mask on the gradient (straight
through), realising the convolution densely inside the graph — the sparse
execution is a forward-time optimisation only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .gating import (
    POLICY_COMPUTE,
    POLICY_REUSE,
    POLICY_SKIP,
    GateParams,
    SparseMask,
    run_gate,
)
from .tensor import ConvSpec, ShapeError, Tensor, _pad2d, as_array, conv2d_raw


class ContractViolation(RuntimeError):
    """Sparse execution was requested without the state it depends on."""


@dataclass
class LayerState:
    """Cached previous-frame input/output features for one sparse layer."""

    prev_input: Optional[np.ndarray] = None
    prev_output: Optional[np.ndarray] = None
    frame_index_of_prev: int = -1


@dataclass
class SparseLayer:
    """A gated convolution layer with temporal state."""

    spec: ConvSpec
    gate: GateParams
    state: LayerState = field(default_factory=LayerState)
    id: str = "layer"


def reset_state(layer: SparseLayer) -> None:
    """Drop cached features, e.g. at a new video sequence boundary."""
    layer.state.prev_input = None
    layer.state.prev_output = None
    layer.state.frame_index_of_prev = -1


def sparse_apply(
    x: np.ndarray,
    kernel: np.ndarray,
    bias: Optional[np.ndarray],
    stride: int,
    padding: int,
    mask: np.ndarray,
    prev_output: Optional[np.ndarray],
) -> Tuple[np.ndarray, int]:
    """Evaluate a policy mask: gather compute-pixel patches, convolve, scatter.

    Returns the output map and the number of computed positions.
    """
    c_out, c_in, k, _ = kernel.shape
    h_out, w_out = mask.shape
    if np.all(mask == POLICY_COMPUTE):
        # full coverage degenerates to the dense kernel (and stays bitwise
        # identical to a dense pass)
        out = conv2d_raw(x, kernel, bias, stride, padding)
        return out, int(mask.size)
    out = np.zeros((c_out, h_out, w_out), dtype=x.dtype)

    reuse_ys, reuse_xs = np.nonzero(mask == POLICY_REUSE)
    if reuse_ys.size:
        if prev_output is None:
            raise ContractViolation(
                "mixed-processing contract violated: reuse policy selected "
                "but no previous output is cached"
            )
        out[:, reuse_ys, reuse_xs] = prev_output[:, reuse_ys, reuse_xs]

    ys, xs = np.nonzero(mask == POLICY_COMPUTE)
    n_compute = ys.size
    if n_compute:
        xp = _pad2d(x, padding)
        offs = np.arange(k)
        rows = ys[:, None] * stride + offs[None, :]  # (n, k)
        cols = xs[:, None] * stride + offs[None, :]
        # patches: (C_i, n, k, k) -> (n, C_i*k*k)
        patches = xp[:, rows[:, :, None], cols[:, None, :]]
        patches = patches.transpose(1, 0, 2, 3).reshape(n_compute, c_in * k * k)
        vals = patches @ kernel.reshape(c_out, c_in * k * k).T
        if bias is not None:
            vals = vals + bias[None, :]
        out[:, ys, xs] = vals.T
    return out, int(n_compute)


def sparse_forward(
    layer: SparseLayer,
    f_cur_in,
    f_prev_in=None,
    mode: str = "sparse",
    rng=None,
    noise=None,
    frame_index: Optional[int] = None,
) -> Tuple[Tensor, Optional[SparseMask], int]:
    """Run one frame through the layer.

    Dense mode convolves everywhere and returns no mask. Sparse mode gates
    per pixel and executes only the compute positions. Either way the
    layer's cached previous input/output are refreshed afterwards.
    Returns (output, mask-or-None, executed multiply-accumulates).
    """
    x = as_array(f_cur_in)
    spec = layer.spec
    if x.ndim != 3 or x.shape[0] != spec.in_channels:
        raise ShapeError(
            f"layer {layer.id}: input shape {x.shape} does not match "
            f"C_i={spec.in_channels}"
        )
    h_out, w_out = spec.out_size(x.shape[1], x.shape[2])
    cost = spec.ksize * spec.ksize * spec.in_channels * spec.out_channels
    bias = spec.bias.data if spec.bias is not None else None

    if mode == "dense":
        out = conv2d_raw(x, spec.kernel.data, bias, spec.stride, spec.padding)
        mask = None
        flops = cost * h_out * w_out
    elif mode == "sparse":
        needs_prev = layer.gate.family in ("triple", "residual")
        prev = as_array(f_prev_in) if f_prev_in is not None else layer.state.prev_input
        if needs_prev:
            if prev is None:
                raise ContractViolation(
                    f"mixed-processing contract violated: layer {layer.id} has "
                    "no previous input for sparse mode"
                )
            if layer.state.prev_output is None:
                raise ContractViolation(
                    f"mixed-processing contract violated: layer {layer.id} has "
                    "no previous output for sparse mode"
                )
        soft, mask = run_gate(layer.gate, prev, x, rng=rng, noise=noise)
        if mask.values.shape != (h_out, w_out):
            raise ShapeError(
                f"layer {layer.id}: gate produced {mask.values.shape}, conv "
                f"output is {(h_out, w_out)}"
            )
        out, n_compute = sparse_apply(
            x,
            spec.kernel.data,
            bias,
            spec.stride,
            spec.padding,
            mask.values,
            layer.state.prev_output,
        )
        flops = cost * n_compute
    else:
        raise ValueError(f"unknown mode {mode!r}")

    layer.state.prev_input = x
    layer.state.prev_output = out
    layer.state.frame_index_of_prev = (
        frame_index if frame_index is not None else layer.state.frame_index_of_prev + 1
    )
    return Tensor(out), mask, flops


def sparse_surrogate(
    x: ag.Node,
    kernel: ag.Node,
    bias: Optional[ag.Node],
    stride: int,
    padding: int,
    soft: ag.Node,
    hard_mask: np.ndarray,
    policies: Sequence[int],
    prev_output: Optional[np.ndarray] = None,
    use_soft_forward: bool = False,
) -> ag.Node:
    """Graph form of the masked layer for training.

    The forward value is the hard selection, hard_compute * conv(x) +
    hard_reuse * prev_output; gradients flow as if the selection were the
    soft one, soft_compute * conv(x) + soft_reuse * prev_output. So the gate
    sees gradients weighted by the candidate values and the kernel sees
    gradients weighted by the soft compute channel. ``use_soft_forward``
    makes the forward soft as well (the differentiable surrogate the
    finite-difference checks run against).
    """
    conv = ag.conv2d(x, kernel, bias, stride, padding)
    dtype = conv.value.dtype
    out = None
    for ch, policy in enumerate(policies):
        if policy == POLICY_SKIP:
            continue
        if policy == POLICY_COMPUTE:
            src = conv
        else:
            if prev_output is None:
                raise ContractViolation(
                    "mixed-processing contract violated: reuse policy in the "
                    "surrogate but no previous output is cached"
                )
            src = ag.constant(prev_output.astype(dtype))
        soft_term = ag.mul(ag.slice_(soft, (ch,)), src)
        if use_soft_forward:
            term = soft_term
        else:
            hard_value = (hard_mask == policy).astype(dtype) * src.value
            term = ag.ste_select(hard_value, soft_term)
        out = term if out is None else ag.add(out, term)
    if out is None:  # family with only a skip policy cannot occur, but be safe
        raise ValueError("surrogate requires at least one non-skip policy")
    return out


def mask_to_pgm_values(mask: np.ndarray) -> np.ndarray:
    """Encode policies for PGM dumps: skip 0, reuse 128, compute 255."""
    lut = np.zeros(3, dtype=np.uint8)
    lut[POLICY_REUSE] = 128
    lut[POLICY_COMPUTE] = 255
    return lut[mask]


def pgm_values_to_mask(img: np.ndarray) -> np.ndarray:
    out = np.zeros(img.shape, dtype=np.int64)
    out[img == 128] = POLICY_REUSE
    out[img == 255] = POLICY_COMPUTE
    return out

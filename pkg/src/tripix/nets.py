"""Network building blocks and the two execution contexts.

The architecture is written once against a small duck-typed context:
``InferCtx`` runs raw arrays through the gather/compute/scatter sparse path
and counts FLOPs, ``TrainCtx`` builds the autograd graph with the straight
through surrogate. Both update the per-layer temporal state, so dense
passes over memory frames prime the sparse passes that follow.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from . import matching
from .flops import FlopCounter, layer_cost
from .gating import (
    FAMILY_POLICIES,
    POLICY_COMPUTE,
    GateParams,
    gumbel_softmax_node,
    harden,
    sample_gumbel,
)
from .sparseconv import (
    ContractViolation,
    LayerState,
    SparseLayer,
    reset_state,
    sparse_forward,
    sparse_surrogate,
)
from .tensor import ConvSpec, Tensor, conv2d_raw


def he_init(rng: np.random.Generator, c_out, c_in, k, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / (c_in * k * k))
    return (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)


class Conv2dLayer:
    """Always-dense convolution with trainable kernel and bias."""

    def __init__(self, name, module, c_in, c_out, ksize, stride=1, padding=None,
                 rng=None, dtype=np.float64, zero_init=False):
        self.name = name
        self.module = module
        self.stride = stride
        self.padding = ksize // 2 if padding is None else padding
        if zero_init or rng is None:
            kernel = np.zeros((c_out, c_in, ksize, ksize), dtype=dtype)
        else:
            kernel = he_init(rng, c_out, c_in, ksize, dtype)
        self.kernel = ag.parameter(kernel, f"{name}.kernel")
        self.bias = ag.parameter(np.zeros(c_out, dtype=dtype), f"{name}.bias")
        self.c_k = ksize * ksize * c_in * c_out

    def spec(self) -> ConvSpec:
        return ConvSpec(
            Tensor(self.kernel.value), Tensor(self.bias.value),
            stride=self.stride, padding=self.padding,
        )

    def parameters(self):
        yield f"{self.name}.kernel", self.kernel, True
        yield f"{self.name}.bias", self.bias, False

    def infer(self, x: np.ndarray, ctx) -> np.ndarray:
        out = conv2d_raw(x, self.kernel.value, self.bias.value, self.stride, self.padding)
        ctx.counter.count_dense(self.name, self.module, self.c_k, out.shape[1] * out.shape[2])
        return out

    def node(self, x: ag.Node, ctx) -> ag.Node:
        return ag.conv2d(x, self.kernel, self.bias, self.stride, self.padding)


class GatedConv:
    """Sparse-capable 3x3 convolution: a conv, its policy gate, and cached state."""

    def __init__(self, name, module, c_in, c_out, stride=1, rng=None,
                 dtype=np.float64, family="triple", tau=1.0):
        self.name = name
        self.module = module
        self.stride = stride
        self.padding = 1
        kernel = he_init(rng, c_out, c_in, 3, dtype)
        self.kernel = ag.parameter(kernel, f"{name}.kernel")
        self.bias = ag.parameter(np.zeros(c_out, dtype=dtype), f"{name}.bias")
        self.family = family
        self.policies = FAMILY_POLICIES[family]
        gate_in = c_in if family == "static" else 2 * c_in
        n_pol = len(self.policies)
        # zero-init: the gate starts unbiased, exploration comes from the noise
        self.gate_kernel = ag.parameter(
            np.zeros((n_pol, gate_in, 3, 3), dtype=dtype), f"{name}.gate_kernel"
        )
        self.gate_bias = ag.parameter(np.zeros(n_pol, dtype=dtype), f"{name}.gate_bias")
        self.c_k = 9 * c_in * c_out
        self.gate_cost = 9 * gate_in * n_pol
        self.layer = SparseLayer(
            spec=self._conv_spec(),
            gate=self._gate_params(tau),
            state=LayerState(),
            id=name,
        )

    def _conv_spec(self) -> ConvSpec:
        return ConvSpec(Tensor(self.kernel.value), Tensor(self.bias.value),
                        stride=self.stride, padding=self.padding)

    def _gate_params(self, tau) -> GateParams:
        return GateParams(
            conv=ConvSpec(Tensor(self.gate_kernel.value), Tensor(self.gate_bias.value),
                          stride=self.stride, padding=1),
            tau=tau,
            family=self.family,
        )

    @property
    def force_policy(self):
        return self.layer.gate.force_policy

    @force_policy.setter
    def force_policy(self, value):
        self.layer.gate.force_policy = value

    def parameters(self):
        yield f"{self.name}.kernel", self.kernel, True
        yield f"{self.name}.bias", self.bias, False
        yield f"{self.name}.gate_kernel", self.gate_kernel, True
        yield f"{self.name}.gate_bias", self.gate_bias, False

    def reset(self):
        reset_state(self.layer)

    def infer(self, x: np.ndarray, ctx) -> np.ndarray:
        mode = "dense" if ctx.processing == "dense" else "sparse"
        out, mask, _ = sparse_forward(
            self.layer, x, mode=mode, frame_index=ctx.frame_index
        )
        area = out.shape[1] * out.shape[2]
        if mask is None:
            ctx.counter.count_dense(self.name, self.module, self.c_k, area)
        else:
            ctx.counter.count_sparse(
                self.name, self.module, self.c_k, area, mask.compute_count()
            )
            if self.layer.gate.force_policy is None:
                ctx.counter.count_gate(self.gate_cost * area)
            if ctx.mask_sink is not None:
                ctx.mask_sink(self.name, ctx.frame_index, mask.values)
        return out.data

    def node(self, x: ag.Node, ctx) -> ag.Node:
        state = self.layer.state
        if ctx.processing == "dense":
            out = ag.conv2d(x, self.kernel, self.bias, self.stride, self.padding)
        else:
            dtype = x.value.dtype
            if self.family != "static":
                if state.prev_input is None or state.prev_output is None:
                    raise ContractViolation(
                        f"mixed-processing contract violated: layer {self.name} "
                        "has no cached state for a sparse training pass"
                    )
            if self.force_policy is not None:
                h_out = (x.value.shape[1] + 2 - 3) // self.stride + 1
                w_out = (x.value.shape[2] + 2 - 3) // self.stride + 1
                hard = np.full((h_out, w_out), self.force_policy, dtype=np.int64)
                soft_v = np.zeros((len(self.policies), h_out, w_out), dtype=dtype)
                soft_v[self.policies.index(self.force_policy)] = 1.0
                soft = ag.constant(soft_v)
            else:
                if self.family == "static":
                    gate_in = x
                else:
                    gate_in = ag.concat(ag.constant(state.prev_input.astype(dtype)), x, axis=0)
                logits = ag.conv2d(gate_in, self.gate_kernel, self.gate_bias, self.stride, 1)
                noise = ctx.noise(logits.value.shape).astype(dtype)
                soft = gumbel_softmax_node(logits, self.layer.gate.tau, noise)
                hard = np.asarray(self.policies)[harden(soft.value)]
            out = sparse_surrogate(
                x, self.kernel, self.bias, self.stride, self.padding,
                soft, hard, self.policies,
                prev_output=state.prev_output,
                use_soft_forward=ctx.use_soft_forward,
            )
            if self.force_policy is None:
                area = hard.size
                compute_ch = self.policies.index(POLICY_COMPUTE)
                soft_frac = ag.mul(ag.sum_(ag.slice_(soft, (compute_ch,))), 1.0 / area)
                ctx.record_gate(
                    self.name, self.c_k, area, soft_frac,
                    int(np.count_nonzero(hard == POLICY_COMPUTE)),
                )
        state.prev_input = x.value
        state.prev_output = out.value
        state.frame_index_of_prev = ctx.frame_index
        return out


@dataclass
class Block:
    """Residual block: two gated (or dense) convs plus a dense skip projection."""

    conv1: object
    conv2: object
    skip: Optional[Conv2dLayer] = None


def run_block(ctx, block: Block, x):
    y = ctx.act(ctx.layer(block.conv1, x))
    y = ctx.layer(block.conv2, y)
    s = ctx.layer(block.skip, x) if block.skip is not None else x
    return ctx.act(ctx.add(y, s))


# ---------------------------------------------------------------------------
# bilinear upsampling as a constant matrix, shared by both contexts

_UPSAMPLE_CACHE: Dict[Tuple, np.ndarray] = {}


def _lin1d(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        lo_c = min(max(lo, 0), n_in - 1)
        hi_c = min(max(lo + 1, 0), n_in - 1)
        m[i, lo_c] += 1.0 - frac
        m[i, hi_c] += frac
    return m


def upsample_matrix(h: int, w: int, factor: int, dtype) -> np.ndarray:
    key = (h, w, factor, np.dtype(dtype).name)
    mat = _UPSAMPLE_CACHE.get(key)
    if mat is None:
        mat = np.kron(_lin1d(h, h * factor), _lin1d(w, w * factor)).astype(dtype)
        _UPSAMPLE_CACHE[key] = mat
    return mat


# ---------------------------------------------------------------------------
# execution contexts


class InferCtx:
    """Raw-array execution with FLOP counting and optional mask dumps."""

    def __init__(self, counter: Optional[FlopCounter] = None,
                 mask_sink: Optional[Callable] = None):
        self.counter = counter if counter is not None else FlopCounter()
        self.mask_sink = mask_sink
        self.processing = "dense"
        self.frame_index = 0

    def layer(self, lyr, x):
        return lyr.infer(x, self)

    def act(self, x):
        return np.maximum(x, 0.0)

    def add(self, a, b):
        return a + b

    def concat(self, a, b, axis=0):
        return np.concatenate([a, b], axis=axis)

    def reshape(self, x, shape):
        return x.reshape(shape)

    def constant(self, x):
        return np.asarray(x)

    def upsample(self, x, factor: int):
        c, h, w = x.shape
        mat = upsample_matrix(h, w, factor, x.dtype)
        return (x.reshape(c, h * w) @ mat.T).reshape(c, h * factor, w * factor)

    def similarity(self, k_q, k_m):
        return matching.similarity(k_q, k_m)

    def readout(self, v_q, v_m, s):
        return matching.readout(v_q, v_m, s)


@dataclass
class GateRecord:
    layer_id: str
    c_k: int
    area: int
    soft_compute_fraction: ag.Node
    hard_compute_count: int


class TrainCtx:
    """Graph-building execution; gates sample noise and report their fractions."""

    def __init__(self, rng: Optional[np.random.Generator] = None,
                 use_soft_forward: bool = False):
        self.rng = rng
        self.use_soft_forward = use_soft_forward
        self.gate_records: List[GateRecord] = []
        self.processing = "dense"
        self.frame_index = 0
        self.mask_sink = None

    def noise(self, shape) -> np.ndarray:
        if self.rng is None:
            return np.zeros(shape)
        return sample_gumbel(shape, self.rng)

    def record_gate(self, layer_id, c_k, area, soft_frac, hard_count):
        self.gate_records.append(GateRecord(layer_id, c_k, area, soft_frac, hard_count))

    def layer(self, lyr, x):
        return lyr.node(x, self)

    def act(self, x):
        return ag.relu(x)

    def add(self, a, b):
        return ag.add(a, b)

    def concat(self, a, b, axis=0):
        return ag.concat(a, b, axis=axis)

    def reshape(self, x, shape):
        return ag.reshape(x, shape)

    def constant(self, x):
        return x if isinstance(x, ag.Node) else ag.constant(x)

    def upsample(self, x: ag.Node, factor: int):
        c, h, w = x.value.shape
        mat = upsample_matrix(h, w, factor, x.value.dtype)
        flat = ag.reshape(x, (c, h * w))
        out = ag.matmul(flat, ag.constant(mat.T))
        return ag.reshape(out, (c, h * factor, w * factor))

    def similarity(self, k_q, k_m):
        return matching.similarity_node(k_q, k_m)

    def readout(self, v_q, v_m, s):
        return matching.readout_node(v_q, v_m, s)


# ---------------------------------------------------------------------------
# model


class Model:
    """Tiny query encoder / memory encoder / decoder with gated sparse convs."""

    def __init__(self, arch: dict, rng: np.random.Generator):
        self.arch = dict(arch)
        ch = tuple(arch["stage_channels"])
        c_key = arch["key_channels"]
        c_val = arch["value_channels"]
        variant = arch["variant"]
        tau = arch["tau"]
        dtype = np.dtype(arch["dtype"])
        family = "triple" if variant == "dense" else variant
        mh = tuple(max(1, c // 2) for c in ch)
        self._layers: List[object] = []

        def dense(name, module, c_in, c_out, k, stride=1, padding=None):
            lyr = Conv2dLayer(name, module, c_in, c_out, k, stride, padding,
                              rng=rng, dtype=dtype)
            self._layers.append(lyr)
            return lyr

        def gated(name, module, c_in, c_out, stride=1):
            lyr = GatedConv(name, module, c_in, c_out, stride,
                            rng=rng, dtype=dtype, family=family, tau=tau)
            self._layers.append(lyr)
            return lyr

        def block(prefix, module, c_in, c_out, stride, sparse=True):
            make = gated if sparse else (
                lambda n, m, ci, co, s=1: dense(n, m, ci, co, 3, s)
            )
            conv1 = make(f"{prefix}.conv1", module, c_in, c_out, stride)
            conv2 = make(f"{prefix}.conv2", module, c_out, c_out, 1)
            skip = None
            if stride != 1 or c_in != c_out:
                skip = dense(f"{prefix}.skip", module, c_in, c_out, 1, stride, 0)
            return Block(conv1, conv2, skip)

        q = "query_encoder"
        self.q_stem = dense("query.stem", q, 3, ch[0], 3, 2)
        self.q_blocks = [
            block("query.s1", q, ch[0], ch[0], 2),
            block("query.s2", q, ch[0], ch[1], 2),
            block("query.s3", q, ch[1], ch[2], 2),
        ]
        self.q_key = dense("query.key", q, ch[2], c_key, 3, 1)
        self.q_value = dense("query.value", q, ch[2], c_val, 3, 1)

        m = "memory_encoder"
        self.m_stem = dense("memory.stem", m, 4, mh[0], 3, 2)
        self.m_blocks = [
            block("memory.s1", m, mh[0], mh[0], 2),
            block("memory.s2", m, mh[0], mh[1], 2),
            block("memory.s3", m, mh[1], mh[2], 2),
        ]
        fuse_in = mh[2] + ch[2]
        self.m_fuse = [
            block("memory.fuse1", m, fuse_in, c_val, 1, sparse=False),
            block("memory.fuse2", m, c_val, c_val, 1, sparse=False),
        ]

        d = "decoder"
        self.d_blocks = [
            block("decoder.s1", d, 2 * c_val + ch[1], c_val, 1),
            block("decoder.s2", d, c_val + ch[0], max(1, c_val // 2), 1),
        ]
        self.d_head = dense("decoder.head", d, max(1, c_val // 2), 2, 1, 1, 0)

        self.key_channels = c_key
        self.value_channels = c_val
        self.stage_channels = ch
        self.dtype = dtype

    def parameters(self) -> Dict[str, ag.Node]:
        out: Dict[str, ag.Node] = {}
        for lyr in self._layers:
            for name, node, _decay in lyr.parameters():
                out[name] = node
        return out

    def decay_flags(self) -> Dict[str, bool]:
        flags: Dict[str, bool] = {}
        for lyr in self._layers:
            for name, _node, decay in lyr.parameters():
                flags[name] = decay
        return flags

    def sparse_layers(self) -> List[GatedConv]:
        return [l for l in self._layers if isinstance(l, GatedConv)]

    def reset_states(self) -> None:
        for lyr in self.sparse_layers():
            lyr.reset()

    def set_force_policy(self, policy: Optional[int]) -> None:
        for lyr in self.sparse_layers():
            lyr.force_policy = policy

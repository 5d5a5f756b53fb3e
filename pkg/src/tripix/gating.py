"""Per-pixel policy gates.

A gate looks at layer inputs and assigns each output pixel one of up to
three policies: 0 = skip (emit zero), 1 = reuse (copy the previous frame's
output pixel), 2 = compute (run the convolution there). The three-policy
gate reads the previous and current inputs side by side; the two baseline
gate families drop one policy each:

* ``static``   — {skip, compute}, sees only the current input
* ``residual`` — {reuse, compute}, sees previous + current

Training samples Gumbel noise for exploration; inference uses zero noise so
the argmax is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autograd as ag
from .tensor import ConvSpec, ShapeError, Tensor, as_array, conv2d_raw, softmax_raw

POLICY_SKIP = 0
POLICY_REUSE = 1
POLICY_COMPUTE = 2

# gate family -> policy value of each gate-conv output channel, in order
FAMILY_POLICIES = {
    "triple": (POLICY_SKIP, POLICY_REUSE, POLICY_COMPUTE),
    "static": (POLICY_SKIP, POLICY_COMPUTE),
    "residual": (POLICY_REUSE, POLICY_COMPUTE),
}

UNIFORM_EPS = 1e-12  # clamp for uniform samples before the double log
_SOFT_FLOOR = np.finfo(np.float64).tiny  # keeps soft values strictly positive


@dataclass
class SoftMask:
    """Differentiable policy distribution, one channel per policy."""

    values: np.ndarray  # (n_policies, H_o, W_o)
    policies: Tuple[int, ...] = FAMILY_POLICIES["triple"]

    def validate(self, tol: float = 1e-6) -> "SoftMask":
        sums = self.values.sum(axis=0)
        if not np.all(np.abs(sums - 1.0) <= tol):
            raise ValueError("soft mask channels do not sum to 1")
        if not (np.all(self.values > 0) and np.all(self.values <= 1)):
            raise ValueError("soft mask values must lie in (0, 1]")
        return self

    def compute_channel(self) -> int:
        return self.policies.index(POLICY_COMPUTE)


@dataclass
class SparseMask:
    """Hard per-pixel policy map with values in {0, 1, 2}."""

    values: np.ndarray  # (H_o, W_o) integer

    def validate(self) -> "SparseMask":
        if not np.isin(self.values, (POLICY_SKIP, POLICY_REUSE, POLICY_COMPUTE)).all():
            raise ValueError("sparse mask values must be in {0, 1, 2}")
        return self

    def compute_count(self) -> int:
        return int(np.count_nonzero(self.values == POLICY_COMPUTE))


@dataclass
class GateParams:
    """Gate convolution plus sampling knobs for one sparse layer."""

    conv: ConvSpec
    tau: float = 1.0
    train_mode: bool = False
    family: str = "triple"
    force_policy: Optional[int] = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.family not in FAMILY_POLICIES:
            raise ValueError(f"unknown gate family {self.family!r}")
        n = len(FAMILY_POLICIES[self.family])
        if self.conv.out_channels != n:
            raise ShapeError(
                f"{self.family} gate conv must emit {n} channels, "
                f"got {self.conv.out_channels}"
            )

    @property
    def policies(self) -> Tuple[int, ...]:
        return FAMILY_POLICIES[self.family]


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def gumbel_softmax(p, tau: float, noise=None, rng=None) -> np.ndarray:
    """Soft policy mask: softmax((log softmax(p) + noise) / tau) over channel 0.

    ``noise`` is used verbatim when supplied (reproducible tests); otherwise
    fresh Gumbel noise is drawn from ``rng``. ``noise=None, rng=None`` means
    zero noise (deterministic inference).
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    pa = as_array(p)
    if noise is not None:
        g = as_array(noise)
        if g.shape != pa.shape:
            raise ShapeError(f"noise shape {g.shape} != logits shape {pa.shape}")
    elif rng is not None:
        g = sample_gumbel(pa.shape, rng)
    else:
        g = np.zeros_like(pa)
    shifted = pa - pa.max(axis=0, keepdims=True)
    log_sm = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    soft = softmax_raw((log_sm + g) / tau, axis=0)
    return np.maximum(soft, _SOFT_FLOOR)


def gumbel_softmax_node(p: ag.Node, tau: float, noise: np.ndarray) -> ag.Node:
    """Autograd version of :func:`gumbel_softmax` with frozen noise.

    Noise is a constant: gradients flow only through the logits.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    log_sm = ag.log(ag.softmax(p, axis=0))
    scaled = ag.mul(ag.add(log_sm, ag.constant(noise)), 1.0 / tau)
    return ag.softmax(scaled, axis=0)


def harden(soft) -> np.ndarray:
    """Channel argmax per position; ties resolve to the lowest channel index."""
    values = soft.values if isinstance(soft, SoftMask) else as_array(soft)
    return np.argmax(values, axis=0)


def _gate_forward(inputs: np.ndarray, params: GateParams, rng, noise):
    policies = np.asarray(params.policies)
    spec = params.conv
    h_out, w_out = spec.out_size(inputs.shape[1], inputs.shape[2])
    if params.force_policy is not None:
        if params.force_policy not in params.policies:
            raise ValueError(
                f"policy {params.force_policy} not available in "
                f"{params.family} gate"
            )
        ch = params.policies.index(params.force_policy)
        soft = np.full((len(policies), h_out, w_out), _SOFT_FLOOR)
        soft[ch] = 1.0
        mask = np.full((h_out, w_out), params.force_policy, dtype=np.int64)
        return SoftMask(soft, params.policies), SparseMask(mask)

    bias = spec.bias.data if spec.bias is not None else None
    logits = conv2d_raw(inputs, spec.kernel.data, bias, spec.stride, spec.padding)
    if params.train_mode:
        soft = gumbel_softmax(logits, params.tau, noise=noise, rng=rng)
    else:
        soft = gumbel_softmax(logits, params.tau)  # zero noise
    mask = policies[harden(soft)]
    return SoftMask(soft, params.policies), SparseMask(mask)


def triple_gate(
    f_prev, f_cur, params: GateParams, rng=None, noise=None
) -> Tuple[SoftMask, SparseMask]:
    """Three-policy gate over the concatenated previous/current inputs."""
    prev, cur = as_array(f_prev), as_array(f_cur)
    if prev.shape != cur.shape:
        raise ShapeError(f"input shapes differ: {prev.shape} vs {cur.shape}")
    if params.family != "triple":
        raise ValueError(f"triple_gate called with {params.family!r} params")
    if params.conv.in_channels != 2 * cur.shape[0]:
        raise ShapeError(
            f"gate conv expects {params.conv.in_channels} channels, "
            f"inputs provide {2 * cur.shape[0]}"
        )
    return _gate_forward(np.concatenate([prev, cur], axis=0), params, rng, noise)


def static_gate(f_cur, params: GateParams, rng=None, noise=None):
    """Two-policy {skip, compute} gate over the current input only."""
    cur = as_array(f_cur)
    if params.family != "static":
        raise ValueError(f"static_gate called with {params.family!r} params")
    if params.conv.in_channels != cur.shape[0]:
        raise ShapeError(
            f"gate conv expects {params.conv.in_channels} channels, "
            f"input provides {cur.shape[0]}"
        )
    return _gate_forward(cur, params, rng, noise)


def residual_gate(f_prev, f_cur, params: GateParams, rng=None, noise=None):
    """Two-policy {reuse, compute} gate over the concatenated inputs."""
    prev, cur = as_array(f_prev), as_array(f_cur)
    if prev.shape != cur.shape:
        raise ShapeError(f"input shapes differ: {prev.shape} vs {cur.shape}")
    if params.family != "residual":
        raise ValueError(f"residual_gate called with {params.family!r} params")
    if params.conv.in_channels != 2 * cur.shape[0]:
        raise ShapeError(
            f"gate conv expects {params.conv.in_channels} channels, "
            f"inputs provide {2 * cur.shape[0]}"
        )
    return _gate_forward(np.concatenate([prev, cur], axis=0), params, rng, noise)


def run_gate(layer_gate: GateParams, f_prev, f_cur, rng=None, noise=None):
    """Dispatch to the right gate for ``layer_gate.family``."""
    if layer_gate.family == "static":
        return static_gate(f_cur, layer_gate, rng=rng, noise=noise)
    if layer_gate.family == "residual":
        return residual_gate(f_prev, f_cur, layer_gate, rng=rng, noise=noise)
    return triple_gate(f_prev, f_cur, layer_gate, rng=rng, noise=noise)

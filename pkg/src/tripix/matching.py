"""Memory bank and similarity/readout for query-against-memory matching.

The similarity score keeps the query-side squared norm and a unit-weight
cross term:

    S = (-|k_Q|^2 + k_Q^T k_M) / sqrt(C_k)

``similarity_full`` additionally subtracts the memory-side squared norm, so
S_full differs from S by exactly -|k_M|^2/sqrt(C_k) per memory column. Row
softmax is what matters downstream; it is invariant to per-row constants,
and the two scores agree under softmax whenever all memory columns share
one norm.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import autograd as ag
from .tensor import ShapeError, as_array, softmax_raw


class MemoryBank:
    """Growing key/value columns from memorized frames."""

    def __init__(self, key_channels: int, value_channels: int, spatial_len: int):
        self.keys = np.zeros((key_channels, 0))
        self.values = np.zeros((value_channels, 0))
        self.spatial_len = spatial_len
        self.frames_memorized = 0

    def append(self, key_frame, value_frame) -> None:
        k, v = as_array(key_frame), as_array(value_frame)
        if k.shape != (self.keys.shape[0], self.spatial_len):
            raise ShapeError(
                f"key frame shape {k.shape} != "
                f"({self.keys.shape[0]}, {self.spatial_len})"
            )
        if v.shape != (self.values.shape[0], self.spatial_len):
            raise ShapeError(
                f"value frame shape {v.shape} != "
                f"({self.values.shape[0]}, {self.spatial_len})"
            )
        self.keys = np.concatenate([self.keys, k], axis=1)
        self.values = np.concatenate([self.values, v], axis=1)
        self.frames_memorized += 1

    @property
    def total_len(self) -> int:
        return self.keys.shape[1]


def append_memory(bank: MemoryBank, key_frame, value_frame) -> None:
    bank.append(key_frame, value_frame)


def similarity(k_q, k_m) -> np.ndarray:
    """Scaled similarity of every query position against every memory column."""
    q, m = as_array(k_q), as_array(k_m)
    if q.shape[0] != m.shape[0]:
        raise ShapeError(f"channel mismatch: {q.shape[0]} vs {m.shape[0]}")
    scale = 1.0 / np.sqrt(q.shape[0])
    q_norm = (q * q).sum(axis=0)
    return (-q_norm[:, None] + q.T @ m) * scale


def similarity_full(k_q, k_m) -> np.ndarray:
    """Similarity with the memory-side norm kept; the oracle for the simplification."""
    q, m = as_array(k_q), as_array(k_m)
    if q.shape[0] != m.shape[0]:
        raise ShapeError(f"channel mismatch: {q.shape[0]} vs {m.shape[0]}")
    scale = 1.0 / np.sqrt(q.shape[0])
    q_norm = (q * q).sum(axis=0)
    m_norm = (m * m).sum(axis=0)
    return (-q_norm[:, None] + q.T @ m - m_norm[None, :]) * scale


def readout(v_q, v_m, s) -> np.ndarray:
    """Concatenate the query value with the similarity-weighted memory value."""
    vq, vm, sm = as_array(v_q), as_array(v_m), as_array(s)
    if sm.shape != (vq.shape[1], vm.shape[1]):
        raise ShapeError(
            f"similarity shape {sm.shape} != ({vq.shape[1]}, {vm.shape[1]})"
        )
    if vq.shape[0] != vm.shape[0]:
        raise ShapeError(f"value channel mismatch: {vq.shape[0]} vs {vm.shape[0]}")
    weights = softmax_raw(sm, axis=1)
    return np.concatenate([vq, vm @ weights.T], axis=0)


def similarity_node(k_q: ag.Node, k_m: ag.Node) -> ag.Node:
    scale = 1.0 / np.sqrt(k_q.value.shape[0])
    q_norm = ag.sum_(ag.mul(k_q, k_q), axis=0)  # (L,)
    q_norm_col = ag.reshape(q_norm, (k_q.value.shape[1], 1))
    cross = ag.matmul(ag.transpose(k_q), k_m)
    return ag.mul(ag.add(ag.mul(q_norm_col, -1.0), cross), scale)


def readout_node(v_q: ag.Node, v_m: ag.Node, s: ag.Node) -> ag.Node:
    weights = ag.softmax(s, axis=1)
    weighted = ag.matmul(v_m, ag.transpose(weights))
    return ag.concat(v_q, weighted, axis=0)

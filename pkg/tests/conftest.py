"""Shared oracles and finite-difference helpers.

The oracles here are deliberately naive (nested loops, literal formulas) and
independent of the library's execution paths.
"""
from __future__ import annotations

import numpy as np
import pytest


def conv2d_loops(x, kernel, bias=None, stride=1, padding=0, count_macs=False):
    """Direct six-nested-loop cross-correlation; optionally counts MACs."""
    c_out, c_in, k, _ = kernel.shape
    assert x.shape[0] == c_in
    h_in, w_in = x.shape[1:]
    h_out = (h_in + 2 * padding - k) // stride + 1
    w_out = (w_in + 2 * padding - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    macs = 0
    for co in range(c_out):
        for oy in range(h_out):
            for ox in range(w_out):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            iy = oy * stride + ky - padding
                            ix = ox * stride + kx - padding
                            if 0 <= iy < h_in and 0 <= ix < w_in:
                                acc += x[ci, iy, ix] * kernel[co, ci, ky, kx]
                            macs += 1  # padded taps still cost a MAC in hardware terms
                if bias is not None:
                    acc += bias[co]
                out[co, oy, ox] = acc
    if count_macs:
        return out, macs
    return out


def eq_select_oracle(conv_out, prev_output, mask):
    """Literal three-policy selection over a dense convolution result."""
    out = np.zeros_like(conv_out)
    compute = mask == 2
    reuse = mask == 1
    out[:, compute] = conv_out[:, compute]
    if reuse.any():
        out[:, reuse] = prev_output[:, reuse]
    return out


def rel_err(a, b, floor=1.0):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(floor, np.max(np.abs(b)) if b.size else floor)
    return np.max(np.abs(a - b)) / scale if a.size else 0.0


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function wrt every entry of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, tol, what=""):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1.0, np.max(np.abs(numeric)))
    err = np.max(np.abs(analytic - numeric)) / scale
    assert err < tol, f"{what}: gradient mismatch {err:.3e} (tol {tol:.1e})"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

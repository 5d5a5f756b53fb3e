import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripix import autograd as ag
from tripix.losses import (
    LossConfig,
    ScheduleState,
    bootstrap_fraction,
    bootstrapped_ce,
    global_sparse_loss,
    layer_sparse_loss,
    relax_bounds,
    scalar,
    total_loss,
)


def ce_pixel(logits, label):
    e = np.exp(logits - logits.max())
    p = e / e.sum()
    return -np.log(p[label])


def test_bootstrap_full_fraction_is_plain_mean(rng):
    logits = rng.standard_normal((2, 4, 4))
    gt = rng.integers(0, 2, (4, 4))
    loss = scalar(bootstrapped_ce(logits, gt, 1.0))
    expected = np.mean(
        [ce_pixel(logits[:, y, x], gt[y, x]) for y in range(4) for x in range(4)]
    )
    assert loss == pytest.approx(expected, rel=1e-12)


def test_bootstrap_perfect_logits_vanish(rng):
    gt = rng.integers(0, 2, (6, 6))
    logits = np.zeros((2, 6, 6))
    logits[0] = np.where(gt == 0, 20.0, -20.0)
    logits[1] = -logits[0]
    assert scalar(bootstrapped_ce(logits, gt, 1.0)) < 1e-8


def test_bootstrap_top_fraction_selects_hardest():
    logits = np.zeros((2, 2, 2))
    logits[1] = np.array([[3.0, 1.0], [-2.0, 0.5]])
    gt = np.array([[1, 1], [1, 0]])
    per_pixel = sorted(
        ce_pixel(logits[:, y, x], gt[y, x]) for y in range(2) for x in range(2)
    )
    expected = np.mean(per_pixel[-2:])  # ceil(0.5 * 4) = 2 hardest pixels
    loss = scalar(bootstrapped_ce(logits, gt, 0.5))
    assert loss == pytest.approx(expected, rel=1e-12)


def test_bootstrap_invalid_fraction(rng):
    logits = rng.standard_normal((2, 2, 2))
    gt = np.zeros((2, 2), dtype=int)
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            bootstrapped_ce(logits, gt, bad)


def test_bootstrap_gradient_matches_fd(rng):
    from conftest import assert_grad_close, numerical_grad

    logits0 = rng.standard_normal((2, 3, 3))
    gt = rng.integers(0, 2, (3, 3))

    def build(arr):
        node = ag.parameter(arr)
        return bootstrapped_ce(node, gt, 1.0), node

    loss, node = build(logits0)
    grads = ag.backward(loss)
    numeric = numerical_grad(lambda a: float(build(a)[0].value), logits0.copy())
    assert_grad_close(grads[node], numeric, 1e-6, "bootstrapped_ce")


def test_layer_loss_exact_values():
    state = ScheduleState(t_upper=0.1, t_lower=0.1, iteration=0, total_iterations=1)
    # bit-for-bit the 64-bit evaluation of (0.5 - 0.1)^2
    assert scalar(layer_sparse_loss(0.5, state)) == (0.5 - 0.1) ** 2
    assert scalar(layer_sparse_loss(0.5, state)) == pytest.approx(0.16, rel=1e-12)
    state = ScheduleState(t_upper=1.0, t_lower=0.05, iteration=0, total_iterations=1)
    assert scalar(layer_sparse_loss(0.02, state)) == pytest.approx(0.0009, rel=1e-12)
    state = ScheduleState(t_upper=0.1, t_lower=0.1, iteration=0, total_iterations=1)
    assert scalar(layer_sparse_loss(0.1, state)) == 0.0


def test_layer_loss_zero_iff_inside_band(rng):
    state = ScheduleState(t_upper=0.6, t_lower=0.2, iteration=0, total_iterations=1)
    for _ in range(200):
        s = float(rng.random())
        val = scalar(layer_sparse_loss(s, state))
        if 0.2 <= s <= 0.6:
            assert val == 0.0
        else:
            assert val > 0.0


def test_layer_loss_increases_with_violation(rng):
    state = ScheduleState(t_upper=0.5, t_lower=0.3, iteration=0, total_iterations=1)
    vals = [scalar(layer_sparse_loss(0.5 + d, state)) for d in (0.1, 0.2, 0.3)]
    assert vals[0] < vals[1] < vals[2]


def test_global_loss_exact_values():
    assert scalar(
        global_sparse_loss([(1.0, 10, 4), (1.0, 20, 4)], 0.1)
    ) == pytest.approx(0.81, rel=1e-12)
    assert scalar(global_sparse_loss([(0.1, 10, 4), (0.1, 3, 7)], 0.1)) == pytest.approx(
        0.0, abs=1e-15
    )
    val = scalar(global_sparse_loss([(1.0, 100, 4), (0.0, 300, 4)], 0.1))
    assert val == pytest.approx(0.0225, rel=1e-12)


def test_global_loss_empty_is_error():
    with pytest.raises(ValueError):
        global_sparse_loss([], 0.1)


def test_total_loss_combinations():
    cfg = LossConfig(gamma=0.0)
    assert scalar(total_loss(0.5, [0.2], 0.1, cfg)) == pytest.approx(0.5)
    cfg = LossConfig(gamma=1.0, beta=1.0)
    assert scalar(total_loss(0.5, [0.0], 0.0, cfg)) == pytest.approx(0.5)
    assert scalar(total_loss(0.5, [0.2], 0.1, cfg)) == pytest.approx(0.8, rel=1e-12)


def test_relax_bounds_endpoints_and_midpoint():
    total = 1000
    s0 = relax_bounds(ScheduleState(0, 0, 0, total), 0.1)
    assert (s0.t_upper, s0.t_lower) == (0.1, 0.1)
    s_end = relax_bounds(ScheduleState(0, 0, 750, total), 0.1)
    assert (s_end.t_upper, s_end.t_lower) == (1.0, 0.0)
    s_late = relax_bounds(ScheduleState(0, 0, 999, total), 0.1)
    assert (s_late.t_upper, s_late.t_lower) == (1.0, 0.0)
    s_mid = relax_bounds(ScheduleState(0, 0, 375, total), 0.1)
    assert s_mid.t_upper == pytest.approx(0.55, rel=1e-12)
    assert s_mid.t_lower == pytest.approx(0.05, rel=1e-12)


def test_relax_bounds_requires_positive_total():
    with pytest.raises(ValueError):
        relax_bounds(ScheduleState(0, 0, 0, 0), 0.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2000), st.integers(0, 2000))
def test_relax_bounds_monotone(i1, i2):
    lo, hi = sorted((i1, i2))
    a = relax_bounds(ScheduleState(0, 0, lo, 2000), 0.1)
    b = relax_bounds(ScheduleState(0, 0, hi, 2000), 0.1)
    assert b.t_upper >= a.t_upper
    assert b.t_lower <= a.t_lower
    assert a.t_lower <= 0.1 <= a.t_upper


def test_bootstrap_fraction_schedule():
    cfg = LossConfig()
    assert bootstrap_fraction(0, 1000, cfg) == 1.0
    assert bootstrap_fraction(200, 1000, cfg) == 1.0
    assert bootstrap_fraction(700, 1000, cfg) == pytest.approx(0.15)
    assert bootstrap_fraction(1000, 1000, cfg) == pytest.approx(0.15)
    mid = bootstrap_fraction(450, 1000, cfg)
    assert 0.15 < mid < 1.0


def test_losses_are_finite_and_nonnegative(rng):
    state = ScheduleState(0.3, 0.1, 0, 1)
    for _ in range(100):
        s = float(rng.random())
        v = scalar(layer_sparse_loss(s, state))
        assert v >= 0 and math.isfinite(v)
        g = scalar(global_sparse_loss([(s, 10, 5)], 0.1))
        assert g >= 0 and math.isfinite(g)

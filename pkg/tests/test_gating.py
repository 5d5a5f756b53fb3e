import numpy as np
import pytest

from tripix.gating import (
    FAMILY_POLICIES,
    GateParams,
    SoftMask,
    gumbel_softmax,
    gumbel_softmax_node,
    harden,
    residual_gate,
    sample_gumbel,
    static_gate,
    triple_gate,
)
from tripix import autograd as ag
from tripix.tensor import ConvSpec, ShapeError, Tensor, softmax_raw

TAU_GRID = (0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 100.0)


def make_gate(c_in, family="triple", tau=1.0, weights=None, bias=None, stride=1):
    n = len(FAMILY_POLICIES[family])
    gate_in = c_in if family == "static" else 2 * c_in
    kernel = np.zeros((n, gate_in, 3, 3)) if weights is None else weights
    b = np.zeros(n) if bias is None else bias
    return GateParams(
        conv=ConvSpec(Tensor(kernel), Tensor(b), stride=stride, padding=1),
        tau=tau,
        family=family,
    )


def test_uniform_logits_give_uniform_soft():
    p = np.zeros((3, 4, 4))
    soft = gumbel_softmax(p, tau=2.5)
    np.testing.assert_allclose(soft, 1 / 3, atol=1e-12)


def test_dominant_logit_value():
    p = np.zeros((3, 2, 2))
    p[0] = 10.0
    soft = gumbel_softmax(p, tau=1.0)
    np.testing.assert_allclose(soft[0], 0.99990, atol=1e-4)


def test_gumbel_argmax_frequencies_match_softmax(rng):
    p = np.array([0.7, -0.4, 1.1])
    target = softmax_raw(p, axis=0)
    n = 100_000
    counts = np.zeros(3)
    # vectorized: sample all noises at once at a single position
    noise = sample_gumbel((n, 3), rng)
    shifted = p - p.max()
    log_sm = shifted - np.log(np.exp(shifted).sum())
    picks = np.argmax(log_sm[None, :] + noise, axis=1)
    for i in range(3):
        counts[i] = np.mean(picks == i)
    np.testing.assert_allclose(counts, target, atol=0.01)


def test_harden_basics():
    assert harden(np.array([[0.1], [0.2], [0.7]]))[0] == 2
    # exact tie resolves to the lowest channel index
    assert harden(np.array([[0.4], [0.4], [0.2]]))[0] == 0


def test_harden_tau_invariant(rng):
    for _ in range(1000):
        p = rng.standard_normal((3, 2, 2)) * 3
        g = sample_gumbel((3, 2, 2), rng)
        tau_a, tau_b = rng.uniform(0.01, 100, 2)
        a = harden(gumbel_softmax(p, tau_a, noise=g))
        b = harden(gumbel_softmax(p, tau_b, noise=g))
        np.testing.assert_array_equal(a, b)


def test_soft_channel_sums_across_tau_grid(rng):
    p = rng.standard_normal((3, 6, 6)) * 4
    g = sample_gumbel((3, 6, 6), rng)
    for tau in TAU_GRID:
        soft = gumbel_softmax(p, tau, noise=g)
        SoftMask(soft).validate(tol=1e-6)


def test_gumbel_softmax_rejects_bad_tau():
    with pytest.raises(ValueError):
        gumbel_softmax(np.zeros((3, 2, 2)), tau=0.0)
    with pytest.raises(ValueError):
        make_gate(2, tau=-1.0)


def test_gumbel_softmax_noise_shape_checked():
    with pytest.raises(ShapeError):
        gumbel_softmax(np.zeros((3, 2, 2)), 1.0, noise=np.zeros((3, 2, 3)))


def test_gumbel_node_matches_raw(rng):
    p = rng.standard_normal((3, 5, 5))
    g = sample_gumbel((3, 5, 5), rng)
    raw = gumbel_softmax(p, 1.3, noise=g)
    node = gumbel_softmax_node(ag.constant(p), 1.3, g)
    np.testing.assert_allclose(node.value, raw, atol=1e-12)


def test_triple_gate_zero_weights_skips_everywhere(rng):
    params = make_gate(3)
    f_prev = rng.standard_normal((3, 8, 8))
    f_cur = rng.standard_normal((3, 8, 8))
    soft, mask = triple_gate(f_prev, f_cur, params)
    assert np.all(mask.values == 0)  # uniform logits, lowest-index tie-break


def test_triple_gate_biased_compute(rng):
    params = make_gate(2, bias=np.array([0.0, 0.0, 50.0]))
    f = rng.standard_normal((2, 6, 6))
    _, mask = triple_gate(f, f, params)
    assert np.all(mask.values == 2)


def test_triple_gate_frozen_noise_matches_argmax(rng):
    weights = rng.standard_normal((3, 6, 3, 3)) * 0.5
    params = make_gate(3, weights=weights)
    f_prev = rng.standard_normal((3, 8, 8))
    f_cur = rng.standard_normal((3, 8, 8))
    g = sample_gumbel((3, 8, 8), rng)
    params.train_mode = True
    soft, mask = triple_gate(f_prev, f_cur, params, noise=g)
    from tripix.tensor import conv2d_raw

    logits = conv2d_raw(
        np.concatenate([f_prev, f_cur]), weights, np.zeros(3), 1, 1
    )
    shifted = logits - logits.max(axis=0, keepdims=True)
    log_sm = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    expected = np.argmax(log_sm + g, axis=0)
    np.testing.assert_array_equal(mask.values, expected)


def test_triple_gate_shape_mismatch(rng):
    params = make_gate(3)
    with pytest.raises(ShapeError):
        triple_gate(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), params)
    with pytest.raises(ShapeError):
        triple_gate(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), params)


def test_inference_is_deterministic(rng):
    weights = rng.standard_normal((3, 4, 3, 3))
    params = make_gate(2, weights=weights)
    f_prev = rng.standard_normal((2, 5, 5))
    f_cur = rng.standard_normal((2, 5, 5))
    _, a = triple_gate(f_prev, f_cur, params)
    _, b = triple_gate(f_prev, f_cur, params)
    np.testing.assert_array_equal(a.values, b.values)


def test_static_gate_policies(rng):
    params = make_gate(3, family="static", bias=np.array([0.0, 30.0]))
    _, mask = static_gate(rng.standard_normal((3, 4, 4)), params)
    assert np.all(mask.values == 2)
    params = make_gate(3, family="static", bias=np.array([30.0, 0.0]))
    _, mask = static_gate(rng.standard_normal((3, 4, 4)), params)
    assert np.all(mask.values == 0)


def test_residual_gate_policies(rng):
    params = make_gate(2, family="residual", bias=np.array([30.0, 0.0]))
    f = rng.standard_normal((2, 4, 4))
    _, mask = residual_gate(f, f, params)
    assert np.all(mask.values == 1)
    params = make_gate(2, family="residual", bias=np.array([0.0, 30.0]))
    _, mask = residual_gate(f, f, params)
    assert np.all(mask.values == 2)


def test_gate_family_dispatch_errors(rng):
    params = make_gate(2, family="static")
    with pytest.raises(ValueError):
        triple_gate(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), params)
    with pytest.raises(ValueError):
        residual_gate(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), params)


def test_forced_policy_masks(rng):
    params = make_gate(2)
    params.force_policy = 2
    soft, mask = triple_gate(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), params)
    assert np.all(mask.values == 2)
    soft.validate()
    params.force_policy = 3
    with pytest.raises(ValueError):
        triple_gate(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)), params)

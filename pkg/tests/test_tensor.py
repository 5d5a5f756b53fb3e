import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tripix.tensor import ConvSpec, ShapeError, Tensor, concat, conv2d_dense, softmax

from conftest import conv2d_loops, rel_err


def test_identity_kernel_passthrough(rng):
    x = Tensor(rng.standard_normal((1, 5, 6)))
    spec = ConvSpec(Tensor(np.ones((1, 1, 1, 1))))
    out = conv2d_dense(x, spec)
    np.testing.assert_array_equal(out.data, x.data)


def test_all_ones_kernel_constant_input():
    c = 0.37
    x = Tensor(np.full((2, 6, 6), c))
    spec = ConvSpec(Tensor(np.ones((1, 2, 3, 3))))
    out = conv2d_dense(x, spec)
    # every interior position sums 3*3*2 taps of value c
    np.testing.assert_allclose(out.data, 18 * c, rtol=1e-13)


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((4, 7, 7))
    kernel = rng.standard_normal((6, 4, 3, 3))
    bias = rng.standard_normal(6)
    spec = ConvSpec(Tensor(kernel), Tensor(bias), stride=2, padding=1)
    out = conv2d_dense(Tensor(x), spec)
    expected = conv2d_loops(x, kernel, bias, stride=2, padding=1)
    assert rel_err(out.data, expected) < 1e-12


def test_conv_oracle_sweep(rng):
    for _ in range(100):
        c_in = int(rng.integers(1, 9))
        c_out = int(rng.integers(1, 9))
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        h = int(rng.integers(k, 10))
        w = int(rng.integers(k, 10))
        padding = int(rng.integers(0, 2))
        x = rng.standard_normal((c_in, h, w))
        kernel = rng.standard_normal((c_out, c_in, k, k))
        spec = ConvSpec(Tensor(kernel), stride=stride, padding=padding)
        out = conv2d_dense(Tensor(x), spec)
        expected = conv2d_loops(x, kernel, stride=stride, padding=padding)
        assert rel_err(out.data, expected) < 1e-12


def test_conv_linearity(rng):
    kernel = rng.standard_normal((3, 2, 3, 3))
    spec = ConvSpec(Tensor(kernel), stride=1, padding=1)
    x = rng.standard_normal((2, 6, 6))
    y = rng.standard_normal((2, 6, 6))
    a, b = 1.7, -0.3
    lhs = conv2d_dense(Tensor(a * x + b * y), spec).data
    rhs = a * conv2d_dense(Tensor(x), spec).data + b * conv2d_dense(Tensor(y), spec).data
    assert rel_err(lhs, rhs) < 1e-10


def test_conv_errors(rng):
    spec = ConvSpec(Tensor(np.ones((1, 2, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d_dense(Tensor(np.ones((3, 5, 5))), spec)  # wrong channel count
    with pytest.raises(ShapeError):
        conv2d_dense(Tensor(np.ones((2, 2, 2))), spec)  # output would be empty
    with pytest.raises(ShapeError):
        ConvSpec(Tensor(np.ones((1, 2, 3))))  # not 4-d


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-12)


def test_softmax_reference_values():
    out = softmax(Tensor([1.0, 2.0, 3.0]), axis=0)
    np.testing.assert_allclose(
        out.data, [0.09003057, 0.24472847, 0.66524096], atol=1e-6
    )


def test_softmax_shift_invariance(rng):
    x = rng.standard_normal((4, 5))
    a = softmax(Tensor(x), axis=1).data
    b = softmax(Tensor(x + 7.25), axis=1).data
    assert rel_err(a, b) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 123456))
def test_softmax_rows_sum_to_one(n, m, seed):
    x = np.random.default_rng(seed).standard_normal((n, m)) * 10
    out = softmax(Tensor(x), axis=0).data
    assert np.all(out > 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-9)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        softmax(Tensor(np.array([np.inf, 0.0])), axis=0)


def test_concat_channels(rng):
    a = Tensor(rng.standard_normal((2, 4, 4)))
    b = Tensor(rng.standard_normal((3, 4, 4)))
    out = concat(a, b, axis=0)
    assert out.shape == (5, 4, 4)
    np.testing.assert_array_equal(out.data[:2], a.data)
    np.testing.assert_array_equal(out.data[2:], b.data)


def test_concat_empty_identity(rng):
    a = Tensor(rng.standard_normal((2, 3, 3)))
    empty = Tensor(np.zeros((0, 3, 3)))
    out = concat(a, empty, axis=0)
    np.testing.assert_array_equal(out.data, a.data)


def test_concat_roundtrip(rng):
    a = rng.standard_normal((2, 3, 3))
    b = rng.standard_normal((4, 3, 3))
    out = concat(Tensor(a), Tensor(b), axis=0).data
    np.testing.assert_array_equal(out[:2], a)
    np.testing.assert_array_equal(out[2:], b)


def test_concat_shape_mismatch(rng):
    with pytest.raises(ShapeError):
        concat(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 4, 3))), axis=0)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ponet.errors import DimensionError, EmptySequenceError, NumericError
from ponet.services.tensor_core import (
    OpCounter,
    affine,
    gelu,
    gelu_grad,
    hadamard,
    layer_norm,
    layer_norm_backward,
    log_softmax,
    make_rng,
    matmul,
    reduce_max_argmax,
    reduce_mean,
    softmax,
)


def test_matmul_identity_and_hand_arithmetic():
    np.testing.assert_array_equal(
        matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]])), [[3.0, 4.0], [5.0, 6.0]]
    )
    np.testing.assert_array_equal(matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])), [[11.0]])


def test_matmul_matches_triple_loop(rng):
    a = rng.normal(size=(7, 5))
    b = rng.normal(size=(5, 3))
    ref = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                ref[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b), ref, rtol=0, atol=1e-12)


def test_matmul_counts_and_rejects_bad_shapes():
    counter = OpCounter()
    matmul(np.ones((4, 3)), np.ones((3, 2)), counter)
    assert counter.mults == 24
    matmul(np.ones((2, 4, 3)), np.ones((2, 3, 5)), counter)
    assert counter.mults == 24 + 2 * 4 * 3 * 5
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((1, 3, 2)))


def test_matmul_rejects_non_finite():
    with pytest.raises(NumericError):
        matmul(np.array([[np.nan]]), np.array([[1.0]]))


def test_affine_and_hadamard_count():
    counter = OpCounter()
    x = np.ones((5, 4))
    out = affine(x, np.ones((4, 3)), np.arange(3.0), counter)
    np.testing.assert_array_equal(out[0], [4.0, 5.0, 6.0])
    assert counter.mults == 60
    affine(np.ones(4), np.ones((4, 3)), np.zeros(3), counter)
    assert counter.mults == 72
    hadamard(np.ones((5, 3)), np.ones((5, 3)), counter)
    assert counter.mults == 87
    counter.reset()
    assert counter.mults == 0
    with pytest.raises(DimensionError):
        hadamard(np.ones(3), np.ones(4))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3, 1 / 3, 1 / 3])
    big = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0)
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax(x), np.exp(x) / np.exp(x).sum(), rtol=0, atol=1e-12)
    with pytest.raises(DimensionError):
        softmax(np.zeros((2, 0)), axis=1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_shift_invariant(x, shift):
    np.testing.assert_allclose(softmax(x), softmax(x + shift), rtol=1e-9, atol=1e-12)
    assert softmax(x).sum() == pytest.approx(1.0)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(3, 5))
    np.testing.assert_allclose(log_softmax(x), np.log(softmax(x)), atol=1e-12)


def test_reduce_mean_examples(rng):
    np.testing.assert_array_equal(reduce_mean(np.array([[1.0, 3.0], [3.0, 1.0]])), [2.0, 2.0])
    np.testing.assert_array_equal(reduce_mean(np.array([[5.0, 7.0]])), [5.0, 7.0])
    x = rng.normal(size=(9, 4))
    np.testing.assert_allclose(reduce_mean(x), sum(x[i] for i in range(9)) / 9, atol=1e-12)
    with pytest.raises(EmptySequenceError):
        reduce_mean(np.zeros((0, 3)))


def test_reduce_max_argmax_examples(rng):
    values, idx = reduce_max_argmax(np.array([[1.0, 5.0], [3.0, 2.0]]))
    np.testing.assert_array_equal(values, [3.0, 5.0])
    np.testing.assert_array_equal(idx, [1, 0])
    values, idx = reduce_max_argmax(np.array([[2.0], [2.0]]))
    assert values[0] == 2.0 and idx[0] == 0

    x = rng.normal(size=(8, 3))
    values, idx = reduce_max_argmax(x)
    for j in range(3):
        best = 0
        for i in range(1, 8):
            if x[i, j] > x[best, j]:
                best = i
        assert idx[j] == best
        assert values[j] == x[best, j]
    with pytest.raises(EmptySequenceError):
        reduce_max_argmax(np.zeros((0, 2)))


def test_layer_norm_zero_rows_give_bias():
    y, _, _ = layer_norm(np.zeros((2, 4)), np.ones(4), np.full(4, 0.5))
    np.testing.assert_array_equal(y, np.full((2, 4), 0.5))


def test_layer_norm_backward_matches_finite_differences(rng):
    x = rng.normal(size=(3, 5))
    gain = rng.normal(size=5)
    bias = rng.normal(size=5)
    dy = rng.normal(size=(3, 5))
    _, x_hat, inv_std = layer_norm(x, gain, bias)
    dx, dgain, dbias = layer_norm_backward(dy, x_hat, inv_std, gain)

    h = 1e-6
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num[idx] = (np.sum(layer_norm(xp, gain, bias)[0] * dy) - np.sum(layer_norm(xm, gain, bias)[0] * dy)) / (2 * h)
    np.testing.assert_allclose(dx, num, atol=1e-6)
    np.testing.assert_allclose(dgain, np.sum(dy * x_hat, axis=0))
    np.testing.assert_allclose(dbias, dy.sum(axis=0))


def test_gelu_grad_matches_finite_differences():
    x = np.linspace(-4, 4, 41)
    h = 1e-6
    np.testing.assert_allclose(gelu_grad(x), (gelu(x + h) - gelu(x - h)) / (2 * h), atol=1e-8)


def test_make_rng_is_deterministic():
    assert np.array_equal(make_rng(7).normal(size=5), make_rng(7).normal(size=5))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_reductions_reject_non_finite(bad):
    x = np.array([[1.0, 2.0], [bad, 0.5]])
    with pytest.raises(NumericError, match="reduce_mean"):
        reduce_mean(x)
    with pytest.raises(NumericError, match="reduce_max_argmax"):
        reduce_max_argmax(x if bad != -np.inf else -x)
    with pytest.raises(NumericError, match="hadamard"):
        hadamard(x, np.ones_like(x))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dcednet.tensor import (OracleError, ShapeError, concat_channels, finite_difference_grad,
                            flat_offset, make_rng, randn, tensor_filled, unravel_offset)


def test_filled_zero():
    np.testing.assert_array_equal(tensor_filled((1, 1, 2, 2), 0.0)[0, 0], [[0, 0], [0, 0]])


def test_filled_single():
    t = tensor_filled((1, 1, 1, 1), 7.5)
    assert t.size == 1 and t.item() == 7.5


def test_filled_length():
    t = tensor_filled((2, 3, 4, 4), 1.0)
    assert t.size == 2 * 3 * 4 * 4 == 96
    assert np.all(t == 1.0)


@pytest.mark.parametrize("shape", [(1, 1, 0, 2), (1, 1, 2), (0, 1, 1, 1)])
def test_filled_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_filled(shape, 1.0)


def test_randn_deterministic():
    a = randn(make_rng(42), (1, 2, 5, 5), 1.0)
    b = randn(make_rng(42), (1, 2, 5, 5), 1.0)
    assert a.tobytes() == b.tobytes()


def test_randn_statistics():
    x = randn(make_rng(7), (1, 1, 100, 100), 1.0).astype(np.float64)
    assert abs(x.mean()) < 0.05
    assert 0.9 <= x.std() <= 1.1


def test_randn_small_std_bound():
    x = randn(make_rng(8), (1, 1, 100, 100), 0.01)
    assert np.abs(x).max() < 0.1


def test_concat_channel_count():
    a = np.zeros((1, 3, 8, 8), np.float32)
    b = np.ones((1, 29, 8, 8), np.float32)
    assert concat_channels(a, b).shape == (1, 32, 8, 8)


def test_concat_empty_channels_rejected():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 3, 8, 8)), np.zeros((1, 0, 8, 8)))


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(np.zeros((1, 3, 8, 8)), np.zeros((1, 2, 4, 8)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_concat_layout(ca, cb, h, w, seed):
    rng = make_rng(seed)
    a, b = rng.random((2, ca, h, w)), rng.random((2, cb, h, w))
    out = concat_channels(a, b)
    np.testing.assert_array_equal(out[:, ca:], b)
    np.testing.assert_array_equal(out[:, :ca], a)


@given(st.tuples(*[st.integers(1, 5)] * 4), st.data())
def test_offsets_roundtrip(shape, data):
    off = data.draw(st.integers(0, int(np.prod(shape)) - 1))
    idx = unravel_offset(shape, off)
    assert flat_offset(shape, idx) == off
    assert np.ravel_multi_index(idx, shape) == off


def test_fd_sum_of_squares():
    g = finite_difference_grad(lambda x: float(np.sum(x ** 2)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g, [2, 4, 6], atol=1e-6)


def test_fd_constant():
    g = finite_difference_grad(lambda x: 3.0, np.ones(5))
    np.testing.assert_array_equal(g, np.zeros(5))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8))
def test_fd_linear(values):
    g = finite_difference_grad(lambda x: float(np.sum(x)), np.array(values))
    np.testing.assert_allclose(g, np.ones(len(values)), atol=1e-8)


def test_fd_nonfinite_raises():
    with pytest.raises(OracleError), np.errstate(all="ignore"):
        finite_difference_grad(lambda x: float(np.log(x[0])), np.array([0.0]))

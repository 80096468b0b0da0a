import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flora.tensor import (axpy, fold, frobenius_norm, matmul, mode_n_product,
                          multi_mode_product, transpose, unfold)

from oracles import frobenius_loop, matmul_loop, mode_product_loop, unfold_loop


@pytest.fixture
def cube():
    # x_ijk = 4(i-1) + 2(j-1) + k with 1-based indices
    return np.arange(1, 9, dtype=float).reshape(2, 2, 2)


def test_unfold_matrix_modes():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(unfold(x, 0), x)
    np.testing.assert_array_equal(unfold(x, 1), x.T)


def test_unfold_cube_last_mode(cube):
    expected = unfold_loop(cube, 2)
    np.testing.assert_array_equal(expected, [[1, 5, 3, 7], [2, 6, 4, 8]])
    np.testing.assert_array_equal(unfold(cube, 2), expected)


@pytest.mark.parametrize("n", [0, 1, 2])
def test_fold_round_trip(n, cube):
    t = np.random.default_rng(n).standard_normal((3, 4, 2))
    np.testing.assert_array_equal(fold(unfold(t, n), n, t.shape), t)
    np.testing.assert_array_equal(fold(unfold(cube, n), n, cube.shape), cube)


def test_fold_identity_on_matrix():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(fold(x, 0, (2, 3)), x)


def test_mode_errors():
    t = np.ones((2, 3))
    with pytest.raises(ValueError):
        unfold(t, 2)
    with pytest.raises(ValueError):
        fold(np.ones((3, 3)), 0, (2, 3))
    with pytest.raises(ValueError):
        mode_n_product(t, np.ones((4, 4)), 0)


def test_mode_product_row_permutation():
    x = np.array([[1.0, 2], [3, 4]])
    u = np.array([[0.0, 1], [1, 0]])
    np.testing.assert_array_equal(mode_n_product(x, u, 0), [[3, 4], [1, 2]])


def test_mode_product_sums_last_mode(cube):
    out = mode_n_product(cube, np.array([[1.0, 1.0]]), 2)
    assert out.shape == (2, 2, 1)
    np.testing.assert_array_equal(out[..., 0], [[3, 7], [11, 15]])


def test_mode_product_matches_loop():
    rng = np.random.default_rng(3)
    t = rng.standard_normal((3, 4, 2))
    u = rng.standard_normal((5, 4))
    np.testing.assert_allclose(mode_n_product(t, u, 1), mode_product_loop(t, u, 1), atol=1e-12, rtol=0)


def test_frobenius():
    assert frobenius_norm(np.zeros((3, 2))) == 0.0
    assert frobenius_norm(np.array([[3.0, 0], [0, 4]])) == 5.0
    t = np.random.default_rng(0).standard_normal((4, 4, 3, 3))
    assert frobenius_norm(t) == pytest.approx(frobenius_loop(t), rel=1e-14)


def test_linear_algebra_plumbing():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(matmul(np.eye(2), x), x)
    y = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(axpy(0.0, x, y), y)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(a, b), matmul_loop(a, b), atol=1e-14)
    np.testing.assert_array_equal(transpose(a), a.T)
    with pytest.raises(ValueError):
        matmul(a, a)
    with pytest.raises(ValueError):
        axpy(1.0, x, np.ones((3, 2)))


def test_rejects_non_finite():
    with pytest.raises(ValueError):
        unfold(np.array([[1.0, np.nan]]), 0)


shapes = st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple)


@settings(max_examples=60, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1), data=st.data())
def test_round_trip_property(shape, seed, data):
    t = np.random.default_rng(seed).standard_normal(shape)
    n = data.draw(st.integers(0, len(shape) - 1))
    np.testing.assert_array_equal(fold(unfold(t, n), n, shape), t)
    np.testing.assert_array_equal(unfold(t, n), unfold_loop(t, n))


@settings(max_examples=40, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1), data=st.data())
def test_contraction_property(shape, seed, data):
    rng = np.random.default_rng(seed)
    t = rng.uniform(-10, 10, shape)
    n = data.draw(st.integers(0, len(shape) - 1))
    u = rng.uniform(-1, 1, (data.draw(st.integers(1, 4)), shape[n]))
    np.testing.assert_allclose(mode_n_product(t, u, n), mode_product_loop(t, u, n), atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(shape=st.lists(st.integers(1, 5), min_size=2, max_size=4).map(tuple),
       seed=st.integers(0, 2**32 - 1), data=st.data())
def test_distinct_modes_commute_and_same_mode_composes(shape, seed, data):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(shape)
    m, n = data.draw(st.lists(st.integers(0, len(shape) - 1), min_size=2, max_size=2, unique=True))
    u = rng.standard_normal((3, shape[m]))
    v = rng.standard_normal((2, shape[n]))
    left = mode_n_product(mode_n_product(t, u, m), v, n)
    right = mode_n_product(mode_n_product(t, v, n), u, m)
    np.testing.assert_allclose(left, right, atol=1e-12, rtol=0)
    w = rng.standard_normal((4, 3))
    np.testing.assert_allclose(mode_n_product(mode_n_product(t, u, m), w, m),
                               mode_n_product(t, w @ u, m), atol=1e-12, rtol=0)


def test_multi_mode_product_skip_and_transpose():
    rng = np.random.default_rng(5)
    core = rng.standard_normal((2, 3))
    fs = [rng.standard_normal((4, 2)), rng.standard_normal((5, 3))]
    np.testing.assert_allclose(multi_mode_product(core, fs), fs[0] @ core @ fs[1].T, atol=1e-13)
    np.testing.assert_allclose(multi_mode_product(core, fs, skip=0), core @ fs[1].T, atol=1e-13)
    full = rng.standard_normal((4, 5))
    np.testing.assert_allclose(multi_mode_product(full, fs, transpose_factors=True),
                               fs[0].T @ full @ fs[1], atol=1e-13)

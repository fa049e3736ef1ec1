import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from contextcluster import tensor as T

finite = st.floats(-10, 10, allow_nan=False, width=64)


def test_matmul_shapes_and_macs():
    a = T.Tensor(np.ones((2, 3, 4)))
    b = T.Tensor(np.ones((4, 5)))
    with T.mac_counter() as macs:
        out = T.matmul(a, b)
    assert out.shape == (2, 3, 5)
    assert macs["other"] == 2 * 3 * 5 * 4


def test_mac_categories_nest():
    a = T.Tensor(np.ones((2, 2)))
    with T.mac_counter() as macs:
        with T.count_macs("similarity"):
            T.matmul(a, a)
        T.matmul(a, a)
    assert macs == {"similarity": 8, "other": 8}


def test_shape_mismatch_raises():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_backward_requires_scalar():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, 2.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_backward_rejects_nan():
    x = T.Tensor(np.array([-1.0]), requires_grad=True)
    with pytest.raises(T.NumericalError):
        T.backward(T.sum(T.log(x)))


def test_unreached_param_gets_zero_grad():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.Tensor(np.ones(2), requires_grad=True)
    grads = T.backward(T.sum(x), [x, y])
    np.testing.assert_array_equal(grads[y], np.zeros(2))
    np.testing.assert_array_equal(grads[x], np.ones(3))


def test_grad_accumulates_over_reuse():
    x = T.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [4.0, 6.0])


def test_no_grad_builds_no_graph():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad


def test_max_argmax_ties_pick_lowest():
    t = T.Tensor(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]]))
    v, idx = T.max_with_argmax(t, axis=1)
    np.testing.assert_array_equal(idx, [1, 0])
    np.testing.assert_array_equal(v.data, [3.0, 2.0])


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(T.Tensor(np.array([-1e4, 0.0, 1e4]))).data
    np.testing.assert_allclose(out, [0.0, 0.5, 1.0])


def test_gelu_known_values():
    # x * Phi(x) with the exact normal cdf
    out = T.gelu(T.Tensor(np.array([0.0, 1.0, -1.0]))).data
    np.testing.assert_allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], rtol=1e-12)


@given(hnp.arrays(np.float64, (3, 4), elements=finite))
def test_split_concat_round_trip(a):
    t = T.Tensor(a)
    parts = T.split(t, [1, 2, 1], axis=1)
    np.testing.assert_array_equal(T.concat(parts, axis=1).data, a)


@given(hnp.arrays(np.float64, (2, 5, 3), elements=finite),
       st.lists(st.integers(0, 4), min_size=1, max_size=7))
def test_gather_matches_fancy_indexing(a, idx):
    idx = np.array(idx)
    np.testing.assert_array_equal(T.gather_rows(T.Tensor(a), idx).data, a[:, idx])


@given(hnp.arrays(np.float64, (4, 3), elements=finite))
def test_scatter_is_gather_adjoint(a):
    # <gather(x), y> == <x, scatter(y)>
    rng = np.random.default_rng(0)
    idx = np.array([2, 0, 2, 4])
    x = rng.standard_normal((5, 3))
    lhs = (T.gather_rows(T.Tensor(x), idx).data * a).sum()
    rhs = (x * T.scatter_rows(T.Tensor(a), idx, 5).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5, width=64)))
def test_l2_normalize_unit_rows(a):
    out = T.l2_normalize(T.Tensor(a)).data
    norms = np.linalg.norm(out, axis=-1)
    big = np.linalg.norm(a, axis=-1) > 1e-3
    np.testing.assert_allclose(norms[big], 1.0, rtol=1e-6)
    assert np.all(norms <= 1.0 + 1e-12)


@given(hnp.arrays(np.float64, (5, 6), elements=st.floats(-5, 5, width=64)))
def test_group_norm_zero_mean_unit_var(a):
    ones, zeros = T.Tensor(np.ones(6)), T.Tensor(np.zeros(6))
    out = T.group_norm(T.Tensor(a), 1, ones, zeros, eps=1e-12).data
    spread = a.std(axis=-1) > 1e-3
    np.testing.assert_allclose(out[spread].mean(-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out[spread].std(-1), 1.0, rtol=1e-5)


def test_dtype_is_preserved():
    x = T.Tensor(np.ones((2, 2), dtype=np.float32))
    assert T.gelu(T.matmul(x, x)).dtype == np.float32

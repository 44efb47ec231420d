import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from brmil import numcore as nc
from brmil.numcore import NumericalError, RngState, Tensor

from gradcases import COMPOSITES, COMPOSITE_TOL, PRIMITIVES, PRIMITIVE_TOL, run_component


def test_matmul_identity():
    out = nc.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert nc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_is_column_sums_of_b(rng):
    a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = rng.normal(size=(5, 3))
    nc.tsum(nc.matmul(a, Tensor(b))).backward()
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.sum(axis=1), (4, 5)), rtol=1e-12)
    rep = nc.grad_check(lambda t: nc.tsum(nc.matmul(t, Tensor(b))), a.data.copy())
    assert rep.max_rel_error < 1e-7


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_symmetric_pair():
    np.testing.assert_allclose(nc.softmax_masked(Tensor([0.0, 0.0]), [True, True]).data, [0.5, 0.5])


def test_softmax_masked_middle():
    out = nc.softmax_masked(Tensor([5.0, -100.0, 5.0]), [True, False, True]).data
    assert out[1] == 0.0
    np.testing.assert_allclose(out, [0.5, 0.0, 0.5], atol=1e-15)


def test_softmax_matches_scalar_oracle():
    out = nc.softmax_masked(Tensor([1.0, 2.0, 3.0])).data
    denom = math.fsum(math.exp(v) for v in (1.0, 2.0, 3.0))
    for got, v in zip(out, (1.0, 2.0, 3.0)):
        assert abs(got - math.exp(v) / denom) < 1e-12


def test_softmax_fully_masked_row_errors():
    with pytest.raises(ValueError, match="fully-masked"):
        nc.softmax_masked(Tensor(np.zeros((2, 3))), np.array([[True, False, False], [False] * 3]))


@given(hnp.arrays(np.float64, (3, 6), elements=st.floats(-30, 30)),
       hnp.arrays(np.bool_, (3, 6)))
def test_softmax_rows_sum_to_one(x, mask):
    mask[:, 0] = True
    out = nc.softmax_masked(Tensor(x), mask).data
    assert np.all(out[~mask] == 0.0)
    assert np.all(out[mask] >= 0.0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_grad_check_quadratic():
    rep = nc.grad_check(lambda t: nc.tsum(t * t), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(rep.analytic, [2, 4, 6])
    assert rep.max_rel_error < 1e-7


def test_grad_check_masked_softmax_dot():
    w = np.array([0.3, -1.0, 2.0, 0.5])
    mask = np.array([True, True, False, True])
    rep = nc.grad_check(lambda t: nc.tsum(nc.softmax_masked(t, mask) * w), np.array([0.1, -0.4, 2.0, 1.0]))
    assert rep.max_rel_error < 1e-5


def test_grad_check_flags_wrong_backward():
    def bad(x):
        x = nc.as_tensor(x)
        return nc._make(x.data ** 2, (x,), lambda g: (g * 3.0,), "bad")
    with pytest.raises(AssertionError):
        nc.grad_check(lambda t: nc.tsum(bad(t)), np.array([1.0, 2.0]), tol=1e-5)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    assert run_component(name) < PRIMITIVE_TOL


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_gradients(name):
    assert run_component(name) < COMPOSITE_TOL


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NumericalError):
        nc.log(Tensor([-1.0]))
    with pytest.raises(NumericalError):
        nc.exp(Tensor([1e4]))


def test_gradient_accumulates_over_shared_inputs():
    x = Tensor([2.0], requires_grad=True)
    (x * x + x).backward()
    np.testing.assert_allclose(x.grad, [5.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with nc.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_reflected_ops_with_arrays():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = np.array([3.0, 3.0]) - x
    assert isinstance(y, Tensor)
    nc.tsum(np.array([2.0, 4.0]) / x).backward()
    np.testing.assert_allclose(x.grad, [-2.0, -1.0])


def test_forward_is_pure():
    g = RngState(5).generator()
    a, b = g.normal(size=(6, 7)), g.normal(size=(7, 3))
    r1 = nc.layer_norm(nc.matmul(Tensor(a), Tensor(b)), np.ones(3), np.zeros(3)).data
    r2 = nc.layer_norm(nc.matmul(Tensor(a), Tensor(b)), np.ones(3), np.zeros(3)).data
    assert r1.tobytes() == r2.tobytes()


def test_rng_streams_are_reproducible_and_independent():
    a = RngState(2020).child("x").generator().random(5)
    b = RngState(2020).child("x").generator().random(5)
    c = RngState(2020).child("y").generator().random(5)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_single_precision_opt_in():
    try:
        nc.set_default_dtype(np.float32)
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        nc.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64

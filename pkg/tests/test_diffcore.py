import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtd import diffcore as dc
from vtd.gradcheck import PRIMITIVE_TOL, check_primitives, check_program

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_forward_examples():
    assert dc.evaluate(dc.square, {"a": np.array(3.0)}) == 9.0
    assert dc.evaluate(dc.sigmoid, {"a": np.array(0.0)}) == 0.5
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = dc.evaluate(dc.matmul, {"a": m, "b": np.eye(2)})
    np.testing.assert_array_equal(out, m)


def test_gradient_examples():
    assert dc.gradient(dc.square, {"a": np.array(3.0)})["a"] == 6.0
    assert dc.gradient(dc.sigmoid, {"a": np.array(0.0)})["a"] == 0.25


def test_matmul_sum_matches_fd():
    rng = np.random.default_rng(1)
    inputs = {"a": rng.uniform(-2, 2, (3, 4)), "b": rng.uniform(-2, 2, (4, 2))}

    def program(a, b):
        return dc.sum(a @ b)

    err = dc.max_relative_error(dc.gradient(program, inputs), dc.fd_gradient(program, inputs))
    assert err <= 1e-6


def test_fd_examples():
    assert abs(dc.fd_gradient(dc.square, {"a": np.array(3.0)}, step=1e-5)["a"] - 6.0) <= 1e-9
    assert abs(dc.fd_gradient(dc.exp, {"a": np.array(0.0)}, step=1e-5)["a"] - 1.0) <= 1e-9


def test_constant_program_has_zero_gradient():
    def program(a):
        return dc.as_var(np.array(4.0))

    inputs = {"a": np.array([1.0, 2.0])}
    np.testing.assert_array_equal(dc.gradient(program, inputs)["a"], 0.0)
    np.testing.assert_array_equal(dc.fd_gradient(program, inputs)["a"], 0.0)


def test_all_primitives_pass_fd_check():
    errs = check_primitives(n_cases=50, seed=3)
    assert set(errs) >= {"matmul", "add", "sigmoid", "log", "clip", "concat", "slice", "mean"}
    assert max(errs.values()) <= PRIMITIVE_TOL, errs


def test_shape_mismatch_raises():
    with pytest.raises(dc.ShapeError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(dc.ShapeError):
        dc.add(np.ones(3), np.ones(4))


def test_nonscalar_output_needs_cotangent():
    x = dc.Var(np.ones(3))
    with pytest.raises(ValueError):
        dc.backward(dc.scale(x, 2.0), [x])


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        dc.fd_gradient(dc.square, {"a": np.array(1.0)}, step=0.0)


def test_log_floor_zero_gradient_below_floor():
    g = dc.gradient(lambda a: dc.sum(dc.log(a, floor=1e-12)), {"a": np.array([0.0, 2.0])})["a"]
    np.testing.assert_array_equal(g, [0.0, 0.5])


def test_shared_subexpression_accumulates():
    g = dc.gradient(lambda a: a * a + a, {"a": np.array(2.0)})["a"]
    assert g == 5.0


def test_repeated_index_gradient_accumulates():
    g = dc.gradient(lambda a: dc.sum(a[np.array([0, 0, 1])]), {"a": np.array([1.0, 1.0, 1.0])})["a"]
    np.testing.assert_array_equal(g, [2.0, 1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite))
def test_evaluate_and_gradient_are_pure(x):
    def program(a):
        return dc.sum(dc.tanh(a) * dc.softplus(a))

    assert np.array_equal(dc.evaluate(program, {"a": x}), dc.evaluate(program, {"a": x}))
    assert np.array_equal(dc.gradient(program, {"a": x})["a"], dc.gradient(program, {"a": x})["a"])


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_softplus_positive_and_sigmoid_interior(x):
    assert np.all(dc.evaluate(dc.softplus, {"a": x}) > 0)
    s = dc.evaluate(dc.sigmoid, {"a": x})
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, 4, elements=st.floats(-2, 2)),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_gradient_is_linear(x, ca, cb):
    def f(a):
        return dc.sum(dc.sigmoid(a) * a)

    def g(a):
        return dc.sum(dc.exp(a))

    def combo(a):
        return dc.scale(f(a), ca) + dc.scale(g(a), cb)

    lhs = dc.gradient(combo, {"a": x})["a"]
    rhs = ca * dc.gradient(f, {"a": x})["a"] + cb * dc.gradient(g, {"a": x})["a"]
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_program_matches_fd(seed):
    rng = np.random.default_rng(seed)
    inputs = {"w": rng.uniform(-2, 2, (3, 2)), "x": rng.uniform(-2, 2, (4, 3))}

    def program(w, x):
        hidden = dc.tanh(x @ w)
        return dc.mean(dc.square(dc.concat([hidden, dc.sigmoid(hidden[:, :1])], axis=1)))

    assert check_program(program, inputs, rng) <= 1e-6

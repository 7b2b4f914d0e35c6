import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficpiml import diffengine as ad
from trafficpiml.exceptions import ConfigurationError, NumericError

from exprgen import central_gradient, random_problem


def test_evaluate_basic():
    x, y = ad.Variable("x"), ad.Variable("y")
    assert ad.evaluate(x ** 2, {"x": 3.0}) == 9.0
    assert ad.evaluate(ad.tanh(x), {"x": 0.0}) == 0.0
    assert ad.evaluate(x * y + y, {"x": 2.0, "y": 5.0}) == 15.0


def test_unbound_variable():
    x = ad.Variable("x")
    with pytest.raises(ConfigurationError):
        ad.evaluate(x + 1.0)


def test_gradient_examples():
    x, y = ad.Variable("x", 3.0), ad.Variable("y")
    (g,) = ad.gradient(x ** 2, [x])
    assert g.value == pytest.approx(6.0)
    gx, gy = ad.gradient(x * y, [x, y], {"x": 2.0, "y": 5.0})
    assert (gx.value, gy.value) == (5.0, 2.0)


def test_nested_derivative_of_cube():
    x = ad.Variable("x", 2.0)
    (g,) = ad.gradient(x ** 3, [x])
    (h,) = ad.gradient(g, [x])
    assert h.value == pytest.approx(12.0)
    (k,) = ad.gradient(h, [x])
    assert k.value == pytest.approx(6.0)


def test_log_at_zero_is_numeric_error():
    x = ad.Variable("x", 0.0)
    with pytest.raises(NumericError):
        ad.gradient(ad.log(x), [x])


def test_gradient_of_unrelated_variable_is_zero():
    x, y = ad.Variable("x", np.ones(3)), ad.Variable("y", 2.0)
    gx, gy = ad.gradient(ad.sum(x * x), [x, y])
    np.testing.assert_allclose(gx.value, 2 * np.ones(3))
    assert gy.value == 0.0


def test_matmul_broadcast_gradient_matches_fd():
    rng = np.random.default_rng(3)
    W = ad.Variable("W", rng.standard_normal((3, 4)))
    b = ad.Variable("b", rng.standard_normal((1, 4)))
    X = ad.Constant(rng.standard_normal((5, 3)))
    loss = ad.mean(ad.tanh(X @ W + b) ** 2)
    grads = ad.gradient(loss, [W, b])
    fd = central_gradient(loss, [W, b], {"W": W.value.copy(), "b": b.value.copy()}, h=1e-6)
    for g, f in zip(grads, fd):
        np.testing.assert_allclose(g.value, f, rtol=1e-6, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_random_expression_gradients(seed):
    rng = np.random.default_rng(seed)
    expr, variables, point = random_problem(rng)
    ad.evaluate(expr, point)
    grads = [g.value for g in ad.gradient(expr, variables)]
    fd = central_gradient(expr, variables, point)
    g, f = np.concatenate(grads), np.concatenate(fd)
    assert np.linalg.norm(g - f) <= 1e-5 * np.linalg.norm(f) + 1e-9


def test_hvp_examples():
    t1, t2 = ad.Variable("t1", 0.3), ad.Variable("t2", -0.7)
    hv = ad.hvp(0.5 * (3 * t1 ** 2 + t2 ** 2), [t1, t2], [1.0, 0.0])
    np.testing.assert_allclose(hv, [3.0, 0.0])
    hv = ad.hvp(t1 * t2, [t1, t2], [1.0, 1.0])
    np.testing.assert_allclose(hv, [1.0, 1.0])


def test_hvp_shape_mismatch():
    t = ad.Variable("t", np.zeros(3))
    with pytest.raises(ConfigurationError):
        ad.hvp(ad.sum(t * t), [t], [np.zeros(2)])


def test_hvp_cubic_matches_gradient_differences():
    rng = np.random.default_rng(11)
    theta = ad.Variable("theta", rng.standard_normal(4))
    c = rng.standard_normal((4, 4, 4))
    q = rng.standard_normal((4, 4))
    loss = ad.sum(ad.sum(ad.Constant(q) * theta * ad.Reshape(theta, (4, 1)))) + ad.sum(theta ** 3 * ad.Constant(c[0, 0]))
    v = rng.standard_normal(4)
    hv = ad.hvp(loss, [theta], [v])[0]
    base = theta.value.copy()
    eps = 1e-4 * (1 + np.linalg.norm(base))

    def grad_at(th):
        theta.bind(th)
        return ad.gradient(loss, [theta], {"theta": th})[0].value.copy()

    fd = (grad_at(base + eps * v) - grad_at(base - eps * v)) / (2 * eps)
    assert np.linalg.norm(hv - fd) / np.linalg.norm(fd) < 1e-4


def test_hvp_operator_is_symmetric():
    rng = np.random.default_rng(5)
    expr, variables, point = random_problem(rng, dim=4)
    ad.evaluate(expr, point)
    op = ad.HVPOperator(expr, variables)
    u, w = rng.standard_normal(op.size), rng.standard_normal(op.size)
    lhs, rhs = u @ op(w), w @ op(u)
    assert abs(lhs - rhs) <= 1e-8 * max(1.0, abs(lhs))


def test_program_rebinds_by_name():
    x = ad.Variable("x", 1.0)
    prog = ad.Program([x * x + 1.0])
    assert prog.run({"x": 2.0})[0] == 5.0
    assert prog.run({"x": 3.0})[0] == 10.0

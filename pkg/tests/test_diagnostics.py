import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficpiml import diagnostics as dg
from trafficpiml import trainer as tr
from trafficpiml.exceptions import ConfigurationError
from trafficpiml.networks import init_params

import scenarios as sc

E1, E2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])


@pytest.fixture(scope="module")
def tiny():
    return sc.tiny()


def test_cone_examples():
    r = dg.cone_test(E1, E2, np.array([1.0, 1.0, 0]))
    assert r.satisfied and r.a == pytest.approx(1) and r.b == pytest.approx(1)
    assert dg.alpha_grid_search(E1, E2, np.array([1.0, 1.0, 0]))[0]
    assert not dg.cone_test(E1, E2, np.array([-1.0, 0, 0])).satisfied
    r = dg.cone_test(E1, E2, np.array([2.0, 1.0, 0]))
    assert r.satisfied and (r.a, r.b) == (pytest.approx(2), pytest.approx(1))
    found, alpha, margin = dg.alpha_grid_search(E1, E2, np.array([2.0, 1.0, 0]))
    assert found and margin > 0 and alpha == pytest.approx(r.alpha_star, abs=1e-3)


def test_cone_degenerate_and_errors():
    r = dg.cone_test(E1, 2 * E1, np.array([1.0, 0, 0]))
    assert r.degenerate and not r.satisfied
    with pytest.raises(ConfigurationError):
        dg.cone_test(E1, E2, np.zeros(3))
    with pytest.raises(ConfigurationError):
        dg.cone_test(E1, E2, np.ones(4))


def test_out_of_span_is_not_satisfied():
    r = dg.cone_test(E1, E2, np.array([1.0, 1.0, 1.0]))
    assert not r.in_span and not r.satisfied and r.improvable


def test_projection_criterion_matches_grid_when_dots_disagree():
    # in-span combination with a, b > 0 yet dot(g_d, g_q) < 0
    g_d, g_p = np.array([1.0, 0.0]), np.array([-0.9, 0.1])
    g_q = g_d + 10 * g_p
    r = dg.cone_test(g_d, g_p, g_q)
    assert r.a > 0 and r.b > 0 and r.dot_d < 0
    assert not r.satisfied
    assert r.improvable == dg.alpha_grid_search(g_d, g_p, g_q)[0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.01, 100.0), st.integers(0, 2))
def test_cone_scale_invariance(seed, c, which):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(3, 12))
    g_d, g_p = rng.standard_normal(dim), rng.standard_normal(dim)
    g_q = rng.uniform(-1, 2) * g_d + rng.uniform(-1, 2) * g_p
    vecs = [g_d, g_p, g_q]
    base = dg.cone_test(*vecs)
    vecs[which] = vecs[which] * c
    scaled = dg.cone_test(*vecs)
    assert scaled.satisfied == base.satisfied
    assert scaled.improvable == base.improvable


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_improvable_matches_grid_search(seed):
    rng = np.random.default_rng(seed)
    dim = int(rng.integers(3, 20))
    g_d, g_p = rng.standard_normal(dim), rng.standard_normal(dim)
    g_q = rng.uniform(-1, 1) * g_d + rng.uniform(-1, 1) * g_p + 0.5 * rng.standard_normal(dim)
    r = dg.cone_test(g_d, g_p, g_q)
    found, _, margin = dg.alpha_grid_search(g_d, g_p, g_q)
    if abs(margin) > 1e-6:
        assert r.improvable == found


def _quadratic_pieces(seed=0, n=6):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    H = A @ A.T + n * np.eye(n)
    return H, rng.standard_normal(n)


def test_probe_step_quadratic_closed_form():
    H, theta = _quadratic_pieces()
    loss = lambda th: 0.5 * th @ H @ th  # noqa: E731
    g = H @ theta
    trip = dg.GradientTriplet(g, g, g)
    eta = 0.01
    rep = dg.probe_step(theta, trip, eta, loss)
    assert rep.imp_total == pytest.approx(eta * g @ g - 0.5 * eta ** 2 * g @ H @ g, rel=1e-10)
    # collinear probes tie, so no strict dominance
    assert rep.imp_total == rep.imp_data == rep.imp_physics and not rep.dominant
    np.testing.assert_allclose(rep.committed, theta - eta * g)
    zero = dg.probe_step(theta, trip, 0.0, loss)
    assert (zero.imp_total, zero.imp_data, zero.imp_physics) == (0.0, 0.0, 0.0)


def test_dominance_ratio_counts():
    log = [{"dominant": k < 3} for k in range(10)]
    assert dg.dominance_ratio(log) == pytest.approx(0.3)
    assert dg.dominance_ratio([{"dominant": False}] * 4) == 0.0
    with pytest.raises(ConfigurationError):
        dg.dominance_ratio([])


def test_triplet_linearity(tiny):
    params = init_params("lwr", seed=3)
    w = tr.LossWeights.with_beta(100.0)
    trip = dg.gradient_triplet(params, tiny, sc.SPEC, w)
    assert trip.linearity_gap() < 1e-10 * max(1.0, np.abs(trip.g_t).max())
    zero = dg.gradient_triplet(params, tiny, sc.SPEC, tr.LossWeights.with_beta(0.0))
    np.testing.assert_allclose(zero.g_t, 100.0 * zero.g_d, rtol=1e-12, atol=1e-14)


def test_triplet_physics_gradient_vanishes_without_collocation(tiny):
    params = init_params("lwr", seed=3)
    trip = dg.gradient_triplet(params, tiny.with_collocation(np.empty((0, 2))), sc.SPEC, tr.LossWeights())
    np.testing.assert_array_equal(trip.g_p, 0.0)


def test_graddiag_log_and_csv(tiny, tmp_path):
    cfg = tr.TrainConfig(epochs=20, repeats=1)
    res = dg.run_graddiag(tiny, sc.SPEC, tr.LossWeights.with_beta(100.0), cfg, probe_every=5)
    assert [e["iter"] for e in res.log] == [0, 5, 10, 15]
    path = dg.write_dominance_csv(res.log, tmp_path / "dom.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,imp_total,imp_data,imp_physics,dominant" and len(lines) == 5
    assert 0.0 <= res.ratio <= 1.0


def test_hessian_top2_diagonal():
    H = np.diag([3.0, 1.0])
    top = dg.hessian_top2(lambda v: H @ v, 2, seed=0, tol=1e-12)
    assert top.lambda1 == pytest.approx(3.0) and top.lambda2 == pytest.approx(1.0)
    assert abs(top.v1[0]) == pytest.approx(1.0) and abs(top.v2[1]) == pytest.approx(1.0)


def test_hessian_top2_isotropic():
    top = dg.hessian_top2(lambda v: v, 5, seed=1)
    assert top.lambda1 == pytest.approx(1.0) and top.lambda2 == pytest.approx(1.0)
    assert abs(top.v1 @ top.v2) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_hessian_top2_matches_dense(seed):
    H, _ = _quadratic_pieces(seed, 10)
    top = dg.hessian_top2(lambda v: H @ v, 10, seed=seed, tol=1e-10, max_iter=20000)
    ref = np.sort(np.linalg.eigvalsh(H))[::-1]
    assert top.converged
    assert abs(top.lambda1 - ref[0]) / ref[0] < 1e-4 and abs(top.lambda2 - ref[1]) / ref[1] < 1e-4
    assert top.lambda1 >= top.lambda2
    assert abs(np.linalg.norm(top.v1) - 1) < 1e-12 and abs(top.v1 @ top.v2) < 1e-6


def test_hessian_orders_by_value_for_indefinite():
    H = np.diag([-5.0, 2.0, 1.0])
    top = dg.hessian_top2(lambda v: H @ v, 3, seed=0, tol=1e-12, max_iter=5000)
    assert top.lambda1 >= top.lambda2


def test_hessian_flags_non_convergence():
    H, _ = _quadratic_pieces(1, 10)
    top = dg.hessian_top2(lambda v: H @ v, 10, seed=0, max_iter=2)
    assert not top.converged and np.isfinite(top.lambda1)


def test_landscape_quadratic_is_exact():
    H, _ = _quadratic_pieces(2, 8)
    top = dg.hessian_top2(lambda v: H @ v, 8, seed=0, tol=1e-13, max_iter=50000)
    w, V = np.linalg.eigh(H)
    v1, v2 = V[:, -1], V[:, -2]
    center = np.zeros(8)
    grid = dg.landscape_grid(lambda th: 0.5 * th @ H @ th + 2.0, center, v1, v2, 0.5, 21, w[-1], w[-2])
    E1g, E2g = np.meshgrid(grid.eps1, grid.eps2, indexing="ij")
    np.testing.assert_allclose(grid.losses, 2.0 + 0.5 * (w[-1] * E1g ** 2 + w[-2] * E2g ** 2), atol=1e-10, rtol=0)
    assert grid.center == 2.0 and grid.center_gap == 0.0
    flat = dg.landscape_grid(lambda th: 0.5 * th @ H @ th, center + 1, top.v1, top.v2, 0.0, 5)
    assert np.ptp(flat.losses) == 0.0


def test_landscape_rejects_bad_directions():
    with pytest.raises(ConfigurationError):
        dg.landscape_grid(np.sum, np.zeros(3), E1, E1, 0.5, 5)
    with pytest.raises(ConfigurationError):
        dg.landscape_grid(np.sum, np.zeros(3), 2 * E1, E2, 0.5, 5)
    with pytest.raises(ConfigurationError):
        dg.landscape_grid(np.sum, np.zeros(3), E1, E2, 0.5, 4)


def test_loss_hvp_matches_gradient_differences(tiny):
    params = init_params("lwr", seed=0)
    loss = tr.build_loss(params, tiny, sc.SPEC, tr.LossWeights.with_beta(100.0))
    hv = dg.loss_hvp(loss, params)
    v = np.random.default_rng(0).standard_normal(len(params))
    v /= np.linalg.norm(v)
    eps = 1e-5
    g_plus = loss.value_and_grad(params.unflatten(params.flatten() + eps * v))[1]
    g_minus = loss.value_and_grad(params.unflatten(params.flatten() - eps * v))[1]
    fd = (g_plus - g_minus) / (2 * eps)
    out = hv(v)
    assert np.linalg.norm(out - fd) / np.linalg.norm(fd) < 1e-4

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trafficpiml import diffengine as ad
from trafficpiml import physics as ph
from trafficpiml.exceptions import ConfigurationError, DomainError
from trafficpiml.networks import init_params

UNIT = ph.PhysicsSpec("arz", u_max=1.0, rho_max=1.0, tau=1.0)


def _constant_fields(r, v):
    def fields(X):
        zero = ad.sum(X, axis=1, keepdims=True) * 0.0
        return zero + r, zero + v
    return fields


def _points():
    return ad.Variable("X", np.random.default_rng(0).uniform(0, 1, (7, 2)))


def test_linear_fields_lwr_residual():
    def fields(X):
        rho = X[:, 0:1] + X[:, 1:2]
        return rho, rho * 0.0 + 1.0

    res = ph.lwr_residual_expr(fields, _points(), UNIT.with_family("lwr"), units="scaled")
    np.testing.assert_allclose(res.f1.value, 2.0)


def test_constant_network_has_zero_residual():
    params = init_params("lwr", seed=0)
    flat = params.flatten() * 0.0
    res = ph.lwr_residual(params.unflatten(flat), ph.PhysicsSpec(), np.random.default_rng(1).uniform(0, 1, (5, 2)))
    np.testing.assert_array_equal(res.f1, 0.0)


def test_equilibrium_constant_state():
    res = ph.arz_residual_expr(_constant_fields(0.3, 0.7), _points(), UNIT, units="scaled")
    np.testing.assert_allclose(res.f1.value, 0.0, atol=1e-15)
    np.testing.assert_allclose(res.f2.value, 0.0, atol=1e-15)


def test_relaxation_term_only():
    res = ph.arz_residual_expr(_constant_fields(0.3, 0.2), _points(), UNIT, units="scaled")
    np.testing.assert_allclose(res.f2.value, 0.2 - 0.7)


def test_manufactured_arz_residuals():
    def fields(X):
        return X[:, 0:1] * 1.0, X[:, 1:2] * 1.0

    X = _points()
    res = ph.arz_residual_expr(fields, X, UNIT, units="scaled")
    x, t = X.value[:, 0:1], X.value[:, 1:2]
    np.testing.assert_allclose(res.f1.value, t, atol=1e-14)
    np.testing.assert_allclose(res.f2.value, x + 2 * t, atol=1e-14)


def test_physical_units_scale_the_residual():
    def fields(X):
        return X[:, 0:1] * 0.5 + X[:, 1:2] * 0.2, X[:, 1:2] * 0.0 + 0.4

    spec = ph.PhysicsSpec()
    norm = ph.Normalization(0.0, 680.0, 0.0, 120.0, spec.rho_max, spec.u_max)
    scaled = ph.lwr_residual_expr(fields, _points(), spec, norm, units="scaled").f1.value
    phys = ph.lwr_residual_expr(fields, _points(), spec, norm, units="physical").f1.value
    np.testing.assert_allclose(phys, scaled * spec.rho_max / 120.0)
    # rho_t + (rho u)_x in physical units, by hand
    expected = 0.2 * spec.rho_max / 120.0 + 0.5 * 0.4 * spec.rho_max * spec.u_max / 680.0
    np.testing.assert_allclose(phys, expected)
    with pytest.raises(ConfigurationError):
        ph.lwr_residual_expr(fields, _points(), spec, norm, units="furlongs")


def test_characteristic_speed_examples():
    spec = ph.PhysicsSpec()
    assert ph.characteristic_speeds(spec, 0.0)[0] == pytest.approx(30.0)
    assert ph.characteristic_speeds(spec, spec.rho_max / 2)[0] == pytest.approx(0.0, abs=1e-12)
    lam1, lam2 = ph.characteristic_speeds(spec.with_family("arz"), spec.rho_max, 5.0)
    assert (lam1, lam2) == (pytest.approx(5.0), pytest.approx(-25.0))
    with pytest.raises(DomainError):
        ph.characteristic_speeds(spec, 0.2)
    with pytest.raises(DomainError):
        ph.characteristic_speeds(spec, -0.01)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 40.0))
def test_arz_jacobian_eigenvalues_match_speeds(frac, u):
    spec = ph.PhysicsSpec("arz")
    rho = frac * spec.rho_max
    eig = np.sort(np.linalg.eigvals(ph.arz_jacobian(spec, rho, u)).real)
    lam1, lam2 = ph.characteristic_speeds(spec, rho, u)
    np.testing.assert_allclose(eig, np.sort([lam1, lam2]), atol=1e-10)
    # strict hyperbolicity away from vacuum
    if frac > 1e-6:
        assert lam2 < lam1


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_lwr_speed_is_flux_derivative(frac):
    spec = ph.PhysicsSpec()
    rho, h = frac * spec.rho_max, 1e-7
    lo, hi = max(rho - h, 0.0), min(rho + h, spec.rho_max)
    fd = (spec.flux(hi) - spec.flux(lo)) / (hi - lo)
    assert ph.characteristic_speeds(spec, rho)[0] == pytest.approx(fd, abs=1e-4)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ph.PhysicsSpec(u_max=0.0)
    with pytest.raises(ConfigurationError):
        ph.PhysicsSpec(pressure="power", pressure_gamma=-1.0)
    with pytest.raises(ConfigurationError):
        ph.PhysicsSpec(tau=0.0)
    power = ph.PhysicsSpec("arz", pressure="power", pressure_c=2.0, pressure_gamma=1.5)
    assert power.P_prime(0.04) == pytest.approx(3.0 * 0.04 ** 0.5)

"""LWR / ARZ residuals, closed-form traffic laws and characteristic speeds.

Residuals are built on normalized coordinates (the network's inputs) and
converted back with the chain-rule factors held in :class:`Normalization`:

* ``units="physical"`` reports f1 in veh/m/s and f2 in m/s^2;
* ``units="scaled"`` divides by ``rho_max/L_t`` and ``u_max/L_t`` respectively,
  the same PDE with O(1) magnitudes, which is what the training loss uses.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import numpy as np

from . import diffengine as ad
from .exceptions import ConfigurationError, DomainError
from .networks import NetworkGraph, ParamVector

UNITS = ("physical", "scaled")


@dataclass(frozen=True)
class PhysicsSpec:
    """Traffic-law settings shared by data generation, residuals and audits.

    ``pressure`` is ``"linear"`` (``P = u_max * rho / rho_max``) or ``"power"``
    (``P = pressure_c * rho ** pressure_gamma``). ``tau`` is expressed in the
    time units of the coordinates it is used with.
    """

    family: str = "lwr"
    u_max: float = 30.0
    rho_max: float = 0.15
    pressure: str = "linear"
    pressure_c: float = 1.0
    pressure_gamma: float = 1.0
    equilibrium_speed: str = "greenshields"
    tau_mode: str = "trainable"
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", str(self.family).lower())
        if self.family not in ("lwr", "arz"):
            raise ConfigurationError(f"unknown family {self.family!r}")
        if self.u_max <= 0 or self.rho_max <= 0:
            raise ConfigurationError("u_max and rho_max must be positive")
        if self.pressure not in ("linear", "power"):
            raise ConfigurationError(f"unknown pressure law {self.pressure!r}")
        if self.pressure == "power" and (self.pressure_c <= 0 or self.pressure_gamma <= 0):
            raise ConfigurationError("power-law pressure needs c > 0 and gamma > 0 so P' > 0")
        if self.equilibrium_speed != "greenshields":
            raise ConfigurationError(f"unknown equilibrium speed {self.equilibrium_speed!r}")
        if self.tau_mode not in ("trainable", "fixed"):
            raise ConfigurationError(f"unknown tau_mode {self.tau_mode!r}")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")

    def with_family(self, family: str) -> "PhysicsSpec":
        return replace(self, family=family)

    # closed forms, physical units ------------------------------------------
    def ueq(self, rho):
        return self.u_max * (1.0 - np.asarray(rho) / self.rho_max)

    def ueq_prime(self, rho):
        return np.full_like(np.asarray(rho, dtype=float), -self.u_max / self.rho_max)

    def flux(self, rho):
        rho = np.asarray(rho)
        return rho * self.ueq(rho)

    def P(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.pressure == "linear":
            return self.u_max * rho / self.rho_max
        return self.pressure_c * rho ** self.pressure_gamma

    def P_prime(self, rho):
        rho = np.asarray(rho, dtype=float)
        if self.pressure == "linear":
            return np.full_like(rho, self.u_max / self.rho_max)
        return self.pressure_c * self.pressure_gamma * rho ** (self.pressure_gamma - 1.0)


@dataclass(frozen=True)
class Normalization:
    """Affine maps between physical and normalized coordinates/values."""

    x0: float = 0.0
    L_x: float = 1.0
    t0: float = 0.0
    L_t: float = 1.0
    rho_max: float = 1.0
    u_max: float = 1.0

    def __post_init__(self):
        if min(self.L_x, self.L_t, self.rho_max, self.u_max) <= 0:
            raise ConfigurationError("normalization scales must be positive")

    @classmethod
    def from_box(cls, x, t, rho_max, u_max):
        x, t = np.asarray(x, float), np.asarray(t, float)
        L_x = float(x.max() - x.min()) or 1.0
        L_t = float(t.max() - t.min()) or 1.0
        return cls(float(x.min()), L_x, float(t.min()), L_t, float(rho_max), float(u_max))

    def inputs(self, x, t):
        x = (np.asarray(x, float) - self.x0) / self.L_x
        t = (np.asarray(t, float) - self.t0) / self.L_t
        return np.column_stack([np.ravel(x), np.ravel(t)])

    @property
    def courant_factor(self) -> float:
        """``u_max * L_t / L_x``: the advection coefficient in normalized units."""
        return self.u_max * self.L_t / self.L_x

    def as_dict(self):
        return {k: getattr(self, k) for k in ("x0", "L_x", "t0", "L_t", "rho_max", "u_max")}


class ResidualValue(NamedTuple):
    f1: np.ndarray
    f2: np.ndarray


class ResidualExprs(NamedTuple):
    f1: ad.Expr
    f2: ad.Expr | None


Fields = Callable[[ad.Expr], tuple]


def _input_grad(quantity: ad.Expr, X: ad.Variable):
    (g,) = ad.gradient(ad.sum(quantity), [X])
    return g[:, 0:1], g[:, 1:2]


def pressure_expr(spec: PhysicsSpec, norm: Normalization, rho_n: ad.Expr) -> ad.Expr:
    """P(rho) / u_max(norm) written on normalized density."""
    scale = norm.rho_max
    if spec.pressure == "linear":
        return rho_n * (spec.u_max * scale / spec.rho_max / norm.u_max)
    c = spec.pressure_c * scale ** spec.pressure_gamma / norm.u_max
    return (rho_n ** spec.pressure_gamma) * c


def ueq_expr(spec: PhysicsSpec, norm: Normalization, rho_n: ad.Expr) -> ad.Expr:
    ratio = norm.rho_max / spec.rho_max
    return (1.0 - rho_n * ratio) * (spec.u_max / norm.u_max)


def lwr_residual_expr(fields: Fields, X: ad.Variable, spec: PhysicsSpec,
                      norm: Normalization = Normalization(), units: str = "physical") -> ResidualExprs:
    """``f1 = d_t rho + d_x(rho u)`` built by differentiating ``fields`` at ``X``."""
    _check_units(units)
    rho, u = fields(X)
    _, rho_t = _input_grad(rho, X)
    q_x, _ = _input_grad(rho * u, X)
    f1 = rho_t + q_x * norm.courant_factor
    if units == "physical":
        f1 = f1 * (norm.rho_max / norm.L_t)
    return ResidualExprs(f1, None)


def arz_residual_expr(fields: Fields, X: ad.Variable, spec: PhysicsSpec,
                      norm: Normalization = Normalization(), units: str = "physical",
                      ueq: Callable | None = None, tau=None) -> ResidualExprs:
    """Mass and momentum residuals of the ARZ system.

    ``f2 = d_t(u + P) + u d_x(u + P) - (U_eq(rho) - u) / tau``. ``ueq`` maps a
    normalized density Expr to a normalized speed (the FD learner in training;
    Greenshields by default). ``tau`` is in normalized time units.
    """
    _check_units(units)
    rho, u = fields(X)
    _, rho_t = _input_grad(rho, X)
    q_x, _ = _input_grad(rho * u, X)
    c = norm.courant_factor
    f1 = rho_t + q_x * c

    psi = u + pressure_expr(spec, norm, rho)
    psi_x, psi_t = _input_grad(psi, X)
    u_eq = ueq(rho) if ueq is not None else ueq_expr(spec, norm, rho)
    if tau is None:
        tau = spec.tau / norm.L_t
    tau = ad.as_expr(tau)
    f2 = psi_t + u * psi_x * c - (u_eq - u) / tau
    if units == "physical":
        f1 = f1 * (norm.rho_max / norm.L_t)
        f2 = f2 * (norm.u_max / norm.L_t)
    return ResidualExprs(f1, f2)


def _check_units(units):
    if units not in UNITS:
        raise ConfigurationError(f"units must be one of {UNITS}")


def _points_variable(points):
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 2:
        raise ConfigurationError("points must have shape (n, 2) of normalized (x, t)")
    return ad.Variable("X", pts)


def lwr_residual(params: ParamVector, spec: PhysicsSpec, points, norm: Normalization = Normalization(),
                 units: str = "physical", fd_output: str = "speed") -> ResidualValue:
    """LWR residual of an LWR-PINN at normalized ``points``."""
    graph = NetworkGraph(params, fd_output)
    X = _points_variable(points)
    res = lwr_residual_expr(graph.fields("lwr"), X, spec, norm, units)
    f1 = res.f1.value[:, 0].copy()
    return ResidualValue(f1, np.zeros_like(f1))


def arz_residuals(params: ParamVector, spec: PhysicsSpec, points, norm: Normalization = Normalization(),
                  units: str = "physical") -> ResidualValue:
    """ARZ residuals of an ARZ-PINN; U_eq is the FD learner, tau = exp(log_tau)."""
    graph = NetworkGraph(params)
    if not graph.has_tau:
        raise ConfigurationError("ARZ residual needs a relaxation time in the parameters")
    X = _points_variable(points)
    res = arz_residual_expr(graph.fields("arz"), X, spec, norm, units, ueq=graph.fdl, tau=graph.tau())
    return ResidualValue(res.f1.value[:, 0].copy(), res.f2.value[:, 0].copy())


# ---------------------------------------------------------------------------
# characteristic speeds
# ---------------------------------------------------------------------------


def _check_density(spec, rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0) or np.any(rho > spec.rho_max):
        raise DomainError(f"density outside [0, {spec.rho_max}]")
    return rho


def characteristic_speeds(spec: PhysicsSpec, rho, u=None):
    """LWR: ``(q'(rho), None)``. ARZ: ``(u, u - rho P'(rho))``."""
    rho = _check_density(spec, rho)
    if spec.family == "lwr":
        lam = spec.ueq(rho) + rho * spec.ueq_prime(rho)
        return lam, None
    if u is None:
        u = spec.ueq(rho)
    u = np.asarray(u, dtype=float)
    return u, u - rho * spec.P_prime(rho)


def arz_jacobian(spec: PhysicsSpec, rho: float, u: float) -> np.ndarray:
    """Quasilinear matrix of the ARZ system in ``(rho, w = u + P(rho))``."""
    rho = float(_check_density(spec, rho))
    dp = float(spec.P_prime(rho))
    return np.array([[u - rho * dp, rho], [0.0, u]])


def max_characteristic_speed(spec: PhysicsSpec) -> float:
    """Conservative bound on |lambda| used by CFL audits: ``u_max``."""
    return spec.u_max

"""CFL audits and Taylor-expansion error lower bounds for LWR / ARZ residuals.

Bounds are sups over a box of pointwise magnitudes built from partial
derivatives of the true fields. The sup is a dense grid search with one local
refinement pass. Higher-order remainders are reported with unit constants and
are never added to the bound.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .datahub import (AnalyticField, DetectorDataset, FieldSolution, time_average)
from .exceptions import ConfigurationError
from .physics import PhysicsSpec

DEFAULT_RESOLUTION = 201
REFINE_RESOLUTION = 21
TEMPORAL_PART_II_NOTE = (
    "Part II temporal term uses the psi_x and psi_t expansions of the derivation; "
    "the displayed statement repeats the u expansion in the second and third factors")


# ---------------------------------------------------------------------------
# CFL
# ---------------------------------------------------------------------------


def cfl_max_dt(delta_x: float, u_max: float = 30.0) -> float:
    """Largest stable time step ``delta_x / u_max`` (same for LWR and ARZ)."""
    if not (delta_x > 0 and u_max > 0):
        raise ConfigurationError("delta_x and u_max must be positive")
    return float(delta_x) / float(u_max)


class CflRow(NamedTuple):
    station: str
    delta_x_m: float
    dt_upper_lwr: float
    dt_upper_arz: float
    actual_dt: float
    passed: bool


@dataclass
class CflReport:
    rows: list
    u_max: float

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def all_fail(self) -> bool:
        return not any(r.passed for r in self.rows)

    def worst_ratio(self) -> float:
        return max(r.actual_dt / r.dt_upper_lwr for r in self.rows)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["station", "delta_x_m", "upper_dt_s", "actual_dt_s", "pass"])
            for r in self.rows:
                w.writerow([r.station, repr(r.delta_x_m), repr(r.dt_upper_lwr), repr(r.actual_dt),
                            "true" if r.passed else "false"])
        return path


def cfl_audit_positions(positions: Sequence[float], actual_dt: float, u_max: float = 30.0,
                        station_ids: Sequence[str] | None = None) -> CflReport:
    """One row per consecutive station pair, labelled by the upstream station."""
    positions = np.asarray(positions, dtype=float)
    if positions.size < 2:
        raise ConfigurationError("CFL audit needs at least two stations")
    ids = list(station_ids) if station_ids is not None else [f"s{i}" for i in range(positions.size)]
    if len(ids) != positions.size:
        raise ConfigurationError("station ids and positions differ in length")
    order = np.argsort(positions, kind="stable")
    positions = positions[order]
    ids = [ids[i] for i in order]
    gaps = np.diff(positions)
    if np.any(gaps <= 0):
        raise ConfigurationError("duplicate station positions")
    rows = []
    for sid, dx in zip(ids[:-1], gaps):
        upper = cfl_max_dt(dx, u_max)
        # ARZ characteristic speeds are bounded by the same u_max, so the limit coincides
        rows.append(CflRow(str(sid), float(dx), upper, upper, float(actual_dt), bool(actual_dt <= upper)))
    return CflReport(rows, float(u_max))


def cfl_audit(dataset: DetectorDataset, spec: PhysicsSpec | None = None, actual_dt: float | None = None) -> CflReport:
    spec = spec or PhysicsSpec()
    stations = dataset.stations()
    ids = [s for s, _ in stations]
    pos = [p for _, p in stations]
    return cfl_audit_positions(pos, dataset.geometry.delta_t if actual_dt is None else actual_dt,
                               spec.u_max, ids)


# ---------------------------------------------------------------------------
# derivative bundles
# ---------------------------------------------------------------------------


class DerivativeBundle:
    """Partials of rho, u, q = rho u, psi, gamma over a box ``(x0, x1, t0, t1)``."""

    def __init__(self, source: Callable, box, spec: PhysicsSpec, kind: str = "analytic", max_order: int = 5):
        self._source = source
        self.box = tuple(float(v) for v in box)
        if not (self.box[1] > self.box[0] and self.box[3] > self.box[2]):
            raise ConfigurationError("degenerate bundle box")
        self.spec = spec
        self.kind = kind
        self.max_order = max_order

    def d(self, name: str, nx: int = 0, nt: int = 0) -> Callable:
        if nx + nt > self.max_order:
            raise ConfigurationError(f"bundle lacks derivative order {nx + nt} of {name}")
        return self._source(name, nx, nt)

    @classmethod
    def from_analytic(cls, analytic: AnalyticField, box=(0.0, 1.0, 0.0, 1.0)) -> "DerivativeBundle":
        return cls(analytic.partial, box, analytic.spec, "analytic")

    @classmethod
    def from_field(cls, fld: FieldSolution) -> "DerivativeBundle":
        """Analytic partials when available, otherwise finite differences on the grid."""
        box = (fld.x_grid[0], fld.x_grid[-1], fld.t_grid[0], fld.t_grid[-1])
        if fld.analytic is not None:
            return cls(fld.analytic.partial, box, fld.spec, "analytic")
        return finite_difference_bundle(fld)


def finite_difference_bundle(fld: FieldSolution, max_order: int = 5) -> DerivativeBundle:
    """Repeated second-order central differences, bilinear interpolation between nodes."""
    spec = fld.spec
    base = {
        "rho": fld.rho,
        "u": fld.u,
        "q": fld.rho * fld.u,
        "psi": fld.u + spec.P(fld.rho),
        "gamma": (spec.ueq(fld.rho) - fld.u) / spec.tau,
    }
    cache = {}

    def table(name, nx, nt):
        key = (name, nx, nt)
        if key not in cache:
            arr = base[name]
            for _ in range(nt):
                arr = np.gradient(arr, fld.dt, axis=0, edge_order=2)
            for _ in range(nx):
                arr = np.gradient(arr, fld.dx, axis=1, edge_order=2)
            cache[key] = RegularGridInterpolator((fld.t_grid, fld.x_grid), arr, bounds_error=False, fill_value=None)
        return cache[key]

    def source(name, nx, nt):
        if name not in base:
            raise ConfigurationError(f"unknown quantity {name!r}")
        interp = table(name, nx, nt)

        def fn(x, t):
            x, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))
            return interp(np.stack([t.ravel(), x.ravel()], axis=-1)).reshape(x.shape)

        return fn

    box = (fld.x_grid[0], fld.x_grid[-1], fld.t_grid[0], fld.t_grid[-1])
    return DerivativeBundle(source, box, spec, "finite-difference", max_order)


# ---------------------------------------------------------------------------
# pointwise bound terms
# ---------------------------------------------------------------------------


def lwr_term(b: DerivativeBundle, dx: float, dt: float):
    """Pointwise magnitude inside the LWR sup."""
    q_xx = b.d("q", 2, 0)
    rho_tt = b.d("rho", 0, 2)
    q_xtt = b.d("q", 1, 2)
    rho_ttt = b.d("rho", 0, 3)
    rho_tttt = b.d("rho", 0, 4)
    q_xxtt = b.d("q", 2, 2)

    def f(x, t):
        return np.abs(dx / 2 * q_xx(x, t) + dt / 2 * rho_tt(x, t) + dt ** 2 / 24 * q_xtt(x, t)
                      + 5 * dt ** 2 / 24 * rho_ttt(x, t) + dt ** 3 / 16 * rho_tttt(x, t)
                      + dx * dt ** 2 / 48 * q_xxtt(x, t))

    return f


def _psi_bar_x(b: DerivativeBundle, dt: float):
    psi_x = b.d("psi", 1, 0)
    psi_xtt = b.d("psi", 1, 2)
    return lambda x, t: psi_x(x, t) + dt ** 2 / 24 * psi_xtt(x, t)


def part2_spatial_term(b: DerivativeBundle, dx: float, dt: float):
    u, psi_bar_x = b.d("u"), _psi_bar_x(b, dt)
    u_xx, u_tt, u_xtt, u_xxtt = b.d("u", 2, 0), b.d("u", 0, 2), b.d("u", 1, 2), b.d("u", 2, 2)
    p_xxx, p_xtt, p_xxtt, p_xxxtt = b.d("psi", 3, 0), b.d("psi", 1, 2), b.d("psi", 2, 2), b.d("psi", 3, 2)
    p_txx, p_ttt, p_xttt, p_xxttt = b.d("psi", 2, 1), b.d("psi", 0, 3), b.d("psi", 1, 3), b.d("psi", 2, 3)
    c2, c3, c4 = dx ** 2 / 2, dt ** 2 / 24, dx * dt ** 2 / 24
    c5 = dx ** 2 * dt ** 2 / 48

    def f(x, t):
        A = c2 * u_xx(x, t) + c3 * u_tt(x, t) + c4 * u_xtt(x, t) + c5 * u_xxtt(x, t)
        B = c2 * p_xxx(x, t) + c3 * p_xtt(x, t) + c4 * p_xxtt(x, t) + c5 * p_xxxtt(x, t)
        C = c2 * p_txx(x, t) + c3 * p_ttt(x, t) + c4 * p_xttt(x, t) + c5 * p_xxttt(x, t)
        return np.abs(A) * np.abs(psi_bar_x(x + dx, t)) + np.abs(u(x, t)) * np.abs(B) + np.abs(C)

    return f


def part2_temporal_term(b: DerivativeBundle, dx: float, dt: float):
    u, psi_bar_x = b.d("u"), _psi_bar_x(b, dt)
    u_t = [b.d("u", 0, k) for k in range(1, 5)]
    p_xt = [b.d("psi", 1, k) for k in range(1, 5)]
    p_tt = [b.d("psi", 0, k + 1) for k in range(1, 5)]
    coef = [dt, dt ** 2 / 2, dt ** 3 / 6, dt ** 4 / 24]

    def series(fns, x, t):
        return sum(c * fn(x, t) for c, fn in zip(coef, fns))

    def f(x, t):
        A = series(u_t, x, t)
        B = series(p_xt, x, t)
        C = series(p_tt, x, t)
        return np.abs(A) * np.abs(psi_bar_x(x, t + dt)) + np.abs(u(x, t)) * np.abs(B) + np.abs(C)

    return f


def part3_spatial_term(b: DerivativeBundle, dx: float, dt: float):
    g_x, g_xx, g_tt = b.d("gamma", 1, 0), b.d("gamma", 2, 0), b.d("gamma", 0, 2)
    g_xtt, g_xxtt = b.d("gamma", 1, 2), b.d("gamma", 2, 2)

    def f(x, t):
        return np.abs(dx * g_x(x, t) + dx ** 2 / 2 * g_xx(x, t) + dt ** 2 / 24 * g_tt(x, t)
                      + dx * dt ** 2 / 24 * g_xtt(x, t) + dx ** 2 * dt ** 2 / 48 * g_xxtt(x, t))

    return f


def part3_temporal_term(b: DerivativeBundle, dx: float, dt: float):
    g = [b.d("gamma", 0, k) for k in range(1, 5)]

    def f(x, t):
        # written out term by term as displayed, averaging corrections last
        return np.abs(dt * g[0](x, t) + dt ** 2 / 2 * g[1](x, t) + dt ** 3 / 6 * g[2](x, t)
                      + dt ** 4 / 24 * g[3](x, t) + dt ** 2 / 24 * g[1](x, t)
                      + dt ** 3 / 24 * g[2](x, t) + dt ** 4 / 48 * g[3](x, t))

    return f


ARZ_PARTS = {
    "part1": lwr_term,
    "partII_S": part2_spatial_term,
    "partII_T": part2_temporal_term,
    "partIII_S": part3_spatial_term,
    "partIII_T": part3_temporal_term,
}


# ---------------------------------------------------------------------------
# sup search and reports
# ---------------------------------------------------------------------------


def sup_search(fn: Callable, box, resolution: int = DEFAULT_RESOLUTION, refine: bool = True):
    """``(max value, (x, t))`` of a vectorized non-negative ``fn`` over ``box``."""
    if resolution < 2:
        raise ConfigurationError("sup-search resolution must be >= 2")
    x0, x1, t0, t1 = box
    xs = np.linspace(x0, x1, resolution)
    ts = np.linspace(t0, t1, resolution)
    X, T = np.meshgrid(xs, ts, indexing="ij")
    vals = fn(X, T)
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    best, where = float(vals[i, j]), (float(xs[i]), float(ts[j]))
    if refine:
        xa, xb = xs[max(i - 1, 0)], xs[min(i + 1, resolution - 1)]
        ta, tb = ts[max(j - 1, 0)], ts[min(j + 1, resolution - 1)]
        Xr, Tr = np.meshgrid(np.linspace(xa, xb, REFINE_RESOLUTION), np.linspace(ta, tb, REFINE_RESOLUTION),
                             indexing="ij")
        vr = fn(Xr, Tr)
        k = np.unravel_index(int(np.argmax(vr)), vr.shape)
        if vr[k] > best:
            best, where = float(vr[k]), (float(Xr[k]), float(Tr[k]))
    return best, where


def _check_steps(dx, dt):
    if not (dx > 0 and dt > 0):
        raise ConfigurationError("delta_x and delta_t must be positive")


@dataclass
class LwrBound:
    eps_lwr: float
    argmax: tuple
    delta_x: float
    delta_t: float
    remainder: float

    def as_dict(self):
        return asdict(self)


@dataclass
class BoundReport:
    eps_lwr: float
    parts: dict
    total: float
    delta_x: float
    delta_t: float
    argmax: dict
    remainders: dict
    notes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "eps_lwr": self.eps_lwr,
            "eps_arz": {**self.parts, "total": self.total},
            "delta_x": self.delta_x,
            "delta_t": self.delta_t,
            "argmax": {k: list(v) for k, v in self.argmax.items()},
            "remainders": self.remainders,
            "notes": list(self.notes),
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.as_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text


def lwr_remainder(dx, dt) -> float:
    return dx ** 2 + dt ** 4 + dt ** 4 / dx + dx ** 2 * dt ** 2


def lwr_bound(bundle: DerivativeBundle, delta_x: float, delta_t: float,
              resolution: int = DEFAULT_RESOLUTION, refine: bool = True) -> LwrBound:
    _check_steps(delta_x, delta_t)
    value, where = sup_search(lwr_term(bundle, delta_x, delta_t), bundle.box, resolution, refine)
    return LwrBound(value, where, float(delta_x), float(delta_t), lwr_remainder(delta_x, delta_t))


def arz_bound(bundle: DerivativeBundle, delta_x: float, delta_t: float,
              resolution: int = DEFAULT_RESOLUTION, refine: bool = True) -> BoundReport:
    _check_steps(delta_x, delta_t)
    parts, argmax = {}, {}
    for name, builder in ARZ_PARTS.items():
        value, where = sup_search(builder(bundle, delta_x, delta_t), bundle.box, resolution, refine)
        parts[name], argmax[name] = value, where
    total = float(sum(parts.values()))
    spatial = delta_x ** 3 + delta_t ** 4 + delta_x ** 3 * delta_t ** 2
    remainders = {
        "part1": lwr_remainder(delta_x, delta_t),
        "partII_S": 2 * spatial,
        "partII_T": 3 * delta_t ** 5,
        "partIII_S": spatial,
        "partIII_T": delta_t ** 5,
    }
    return BoundReport(parts["part1"], parts, total, float(delta_x), float(delta_t), argmax, remainders,
                       [TEMPORAL_PART_II_NOTE])


class OrderingVerdict(NamedTuple):
    holds: bool
    strict: bool
    eps_lwr: float
    eps_arz: float
    extra: float


def compare_bounds(lwr: LwrBound, arz: BoundReport, tol: float = 1e-12) -> OrderingVerdict:
    """``eps_arz_total >= eps_lwr``; strict whenever an extra part exceeds ``tol``."""
    if not (np.isclose(lwr.delta_x, arz.delta_x, rtol=0, atol=0) and lwr.delta_t == arz.delta_t):
        raise ConfigurationError("bounds were evaluated at different (delta_x, delta_t)")
    extra = arz.total - arz.parts["part1"]
    holds = arz.total >= lwr.eps_lwr
    any_extra = any(arz.parts[k] > tol for k in ARZ_PARTS if k != "part1")
    strict = arz.total > lwr.eps_lwr
    return OrderingVerdict(bool(holds), bool(strict and any_extra), lwr.eps_lwr, arz.total, float(extra))


# ---------------------------------------------------------------------------
# averaging and difference-error convergence
# ---------------------------------------------------------------------------


@dataclass
class AveragingReport:
    steps: list
    averaging_error: list
    averaging_slope: float
    spatial_error: list
    spatial_leading: list
    spatial_slope: float
    temporal_error: list
    temporal_leading: list
    temporal_slope: float

    def as_dict(self):
        return asdict(self)


def fit_slope(steps, errors) -> float:
    """Least-squares slope of log(error) against log(step)."""
    steps, errors = np.asarray(steps, float), np.asarray(errors, float)
    keep = errors > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(steps[keep]), np.log(errors[keep]), 1)[0])


def averaging_term_check(fld: FieldSolution, delta_ts: Sequence[float], x=None, t=None) -> AveragingReport:
    """Empirical orders of the averaging law and of forward-difference errors.

    (i) ``max |f_bar - f - dt^2/24 f_tt|`` (rho, window centred at ``t``);
    (ii) forward difference of q = rho u in x minus ``q_x`` against ``dx/2 q_xx``,
    with ``dx`` running over the same list; (iii) forward difference of the
    averaged rho in time minus ``rho_t`` against ``dt/2 rho_tt``.
    """
    steps = [float(s) for s in delta_ts]
    if len(steps) < 3:
        raise ConfigurationError("averaging check needs at least three steps")
    if fld.analytic is None:
        raise ConfigurationError("averaging check needs an analytic field")
    a = fld.analytic
    t_mid = fld.t_grid[fld.t_grid.size // 2] if t is None else float(t)
    xs = fld.x_grid if x is None else np.atleast_1d(np.asarray(x, float))

    avg_err, sp_err, sp_lead, tm_err, tm_lead = [], [], [], [], []
    for s in steps:
        avg = time_average(fld, s, [t_mid])
        if avg.t_centers.size != 1:
            raise ConfigurationError(f"window of length {s} leaves the time grid")
        cols = np.searchsorted(fld.x_grid, xs)
        f = a("rho", fld.x_grid[cols], t_mid)
        f_tt = a("rho", fld.x_grid[cols], t_mid, 0, 2)
        avg_err.append(float(np.max(np.abs(avg.rho_bar[0, cols] - f - s ** 2 / 24 * f_tt))))

        xm = fld.x_grid[cols]
        fd = (a("q", xm + s, t_mid) - a("q", xm, t_mid)) / s - a("q", xm, t_mid, 1, 0)
        sp_err.append(float(np.max(np.abs(fd))))
        sp_lead.append(float(np.max(np.abs(s / 2 * a("q", xm, t_mid, 2, 0)))))

        later = time_average(fld, s, [t_mid + s])
        if later.t_centers.size != 1:
            raise ConfigurationError("temporal difference window leaves the time grid")
        fdt = (later.rho_bar[0, cols] - avg.rho_bar[0, cols]) / s - a("rho", xm, t_mid, 0, 1)
        tm_err.append(float(np.max(np.abs(fdt))))
        tm_lead.append(float(np.max(np.abs(s / 2 * a("rho", xm, t_mid, 0, 2)))))

    return AveragingReport(steps, avg_err, fit_slope(steps, avg_err), sp_err, sp_lead, fit_slope(steps, sp_err),
                           tm_err, tm_lead, fit_slope(steps, tm_err))

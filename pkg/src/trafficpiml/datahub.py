"""Ground truth, detector emulation, collocation and detector CSV IO.

Conventions: field matrices are indexed ``[time, position]``; positions in
metres and times in seconds unless a manufactured field is built on a unit
box. Godunov solutions live on cell centres.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import sympy as sp
from numpy.lib.stride_tricks import sliding_window_view
from scipy.integrate import simpson

from .exceptions import CFLViolationError, ConfigurationError, DomainError
from .physics import Normalization, PhysicsSpec

MPH_TO_MPS = 0.44704
METRES_PER_MILE = 1609.344
CSV_HEADER = ("station_id", "position_m", "timestamp_s", "speed", "density")
QUANTITIES = ("rho", "u", "q", "psi", "gamma")
MAX_ORDER = 5
_GRID_TOL = 1e-9


# ---------------------------------------------------------------------------
# analytic descriptors
# ---------------------------------------------------------------------------


class AnalyticField:
    """Closed-form rho(x, t), u(x, t) with partials of rho, u, rho*u, psi, gamma.

    ``psi = u + P(rho)`` and ``gamma = (U_eq(rho) - u) / tau`` use the closed
    forms of ``spec``. Partials are symbolic and lambdified on demand.
    """

    x, t = sp.symbols("x t", real=True)

    def __init__(self, rho_expr, u_expr, spec: PhysicsSpec, kind: str = "custom", params=None):
        self.spec = spec
        self.kind = kind
        self.params = dict(params or {})
        rho = sp.sympify(rho_expr)
        u = sp.sympify(u_expr)
        if spec.pressure == "linear":
            P = spec.u_max * rho / spec.rho_max
        else:
            P = spec.pressure_c * rho ** spec.pressure_gamma
        ueq = spec.u_max * (1 - rho / spec.rho_max)
        self.exprs = {
            "rho": rho,
            "u": u,
            "q": rho * u,
            "psi": u + P,
            "gamma": (ueq - u) / spec.tau,
        }
        self._cache: dict[tuple, Callable] = {}

    def expr(self, name: str, nx: int = 0, nt: int = 0):
        if name not in self.exprs:
            raise ConfigurationError(f"unknown quantity {name!r}; expected one of {QUANTITIES}")
        if nx < 0 or nt < 0 or nx + nt > MAX_ORDER:
            raise ConfigurationError(f"derivative order ({nx}, {nt}) not available (max total {MAX_ORDER})")
        e = self.exprs[name]
        if nx:
            e = sp.diff(e, self.x, nx)
        if nt:
            e = sp.diff(e, self.t, nt)
        return e

    def partial(self, name: str, nx: int = 0, nt: int = 0) -> Callable:
        """Vectorized evaluator of d^nx/dx^nx d^nt/dt^nt of ``name``."""
        key = (name, nx, nt)
        fn = self._cache.get(key)
        if fn is None:
            e = self.expr(name, nx, nt)
            raw = sp.lambdify((self.x, self.t), e, "numpy")

            def fn(x, t, _raw=raw):
                x, t = np.broadcast_arrays(np.asarray(x, float), np.asarray(t, float))
                return np.broadcast_to(np.asarray(_raw(x, t), dtype=float), x.shape).copy()

            self._cache[key] = fn
        return fn

    def __call__(self, name, x, t, nx=0, nt=0):
        return self.partial(name, nx, nt)(x, t)


@dataclass
class FieldSolution:
    """Dense ground truth on a uniform grid; matrices are ``[time, position]``."""

    x_grid: np.ndarray
    t_grid: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    spec: PhysicsSpec = field(default_factory=PhysicsSpec)
    analytic: AnalyticField | None = None

    def __post_init__(self):
        self.x_grid = np.asarray(self.x_grid, dtype=float)
        self.t_grid = np.asarray(self.t_grid, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        shape = (self.t_grid.size, self.x_grid.size)
        if self.rho.shape != shape or self.u.shape != shape:
            raise ConfigurationError(f"field matrices must have shape {shape}")
        for name, grid in (("x", self.x_grid), ("t", self.t_grid)):
            if grid.size >= 3:
                steps = np.diff(grid)
                if np.ptp(steps) > 1e-9 * max(1.0, abs(steps).max()):
                    raise ConfigurationError(f"{name} grid is not uniform")

    @property
    def dx(self) -> float:
        return float(self.x_grid[1] - self.x_grid[0]) if self.x_grid.size > 1 else 0.0

    @property
    def dt(self) -> float:
        return float(self.t_grid[1] - self.t_grid[0]) if self.t_grid.size > 1 else 0.0

    def values(self, quantity: str) -> np.ndarray:
        if quantity == "rho":
            return self.rho
        if quantity == "u":
            return self.u
        raise ConfigurationError(f"unknown quantity {quantity!r}")

    @classmethod
    def from_functions(cls, x_grid, t_grid, rho_fn, u_fn=None, spec=None) -> "FieldSolution":
        """Tabulate callables ``f(x, t)`` on a grid (no range checks)."""
        spec = spec or PhysicsSpec()
        T, X = np.meshgrid(np.asarray(t_grid, float), np.asarray(x_grid, float), indexing="ij")
        rho = np.broadcast_to(rho_fn(X, T), X.shape)
        u = np.broadcast_to(u_fn(X, T), X.shape) if u_fn is not None else np.zeros_like(X)
        return cls(x_grid, t_grid, rho, u, spec)


def _check_range(spec, rho, u):
    tol = 1e-12
    if np.min(rho) < -tol or np.max(rho) > spec.rho_max * (1 + tol):
        raise DomainError(f"density leaves [0, {spec.rho_max}] (range {np.min(rho):.4g}..{np.max(rho):.4g})")
    if np.min(u) < -tol * spec.u_max or np.max(u) > spec.u_max * (1 + tol):
        raise DomainError(f"speed leaves [0, {spec.u_max}] (range {np.min(u):.4g}..{np.max(u):.4g})")


def manufactured_solution(kind: str, spec: PhysicsSpec | None = None, x_grid=None, t_grid=None,
                          **params) -> FieldSolution:
    """Closed-form fields with every partial up to order 5.

    kinds:
      ``constant``: ``rho0`` (default rho_max/4), ``u0`` (default U_eq(rho0));
      ``separable_sine``: ``rho = a + b sin(k_x x) sin(k_t t)`` with
        ``u = U_eq(rho) + u_amp cos(k_x x) sin(k_t t)`` (``u_amp`` default 0);
      ``polynomial``: ``rho = sum c[i, j] x^i t^j`` from ``coeffs`` (dict or
        2-d array), ``u = U_eq(rho)`` plus optional ``u_coeffs`` likewise.

    The range check runs on the tabulation grid (default 101 x 101 on [0, 1]^2).
    """
    spec = spec or PhysicsSpec()
    x, t = AnalyticField.x, AnalyticField.t
    ueq = lambda r: spec.u_max * (1 - r / spec.rho_max)  # noqa: E731
    if kind == "constant":
        rho0 = float(params.get("rho0", spec.rho_max / 4))
        u0 = params.get("u0")
        rho_e = sp.Float(rho0)
        u_e = ueq(rho_e) if u0 is None else sp.Float(float(u0))
    elif kind == "separable_sine":
        a = float(params.get("a", spec.rho_max / 2))
        b = float(params.get("b", 0.1 * spec.rho_max))
        kx = float(params.get("k_x", np.pi))
        kt = float(params.get("k_t", np.pi))
        u_amp = float(params.get("u_amp", 0.0))
        rho_e = a + b * sp.sin(kx * x) * sp.sin(kt * t)
        u_e = ueq(rho_e) + u_amp * sp.cos(kx * x) * sp.sin(kt * t)
    elif kind == "polynomial":
        rho_e = _poly(params.get("coeffs", {(0, 0): spec.rho_max / 2}), x, t)
        u_e = ueq(rho_e)
        if "u_coeffs" in params:
            u_e = u_e + _poly(params["u_coeffs"], x, t)
    else:
        raise ConfigurationError(f"unknown manufactured kind {kind!r}")

    analytic = AnalyticField(rho_e, u_e, spec, kind, params)
    x_grid = np.linspace(0.0, 1.0, 101) if x_grid is None else np.asarray(x_grid, float)
    t_grid = np.linspace(0.0, 1.0, 101) if t_grid is None else np.asarray(t_grid, float)
    T, X = np.meshgrid(t_grid, x_grid, indexing="ij")
    rho = analytic("rho", X, T)
    u = analytic("u", X, T)
    _check_range(spec, rho, u)
    return FieldSolution(x_grid, t_grid, rho, u, spec, analytic)


def _poly(coeffs, x, t):
    if isinstance(coeffs, dict):
        items = coeffs.items()
    else:
        arr = np.asarray(coeffs, float)
        items = (((i, j), arr[i, j]) for i in range(arr.shape[0]) for j in range(arr.shape[1]))
    return sp.Add(*[float(c) * x ** int(i) * t ** int(j) for (i, j), c in items if c != 0], sp.Integer(0))


# ---------------------------------------------------------------------------
# Godunov LWR solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GodunovGrid:
    nx: int
    nt: int
    dx: float
    dt: float
    x0: float = 0.0

    def __post_init__(self):
        if self.nx < 2 or self.nt < 1 or self.dx <= 0 or self.dt <= 0:
            raise ConfigurationError("Godunov grid needs nx >= 2, nt >= 1, dx > 0, dt > 0")

    @property
    def centers(self):
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx


def godunov_flux(spec: PhysicsSpec, rho_left, rho_right):
    """Greenshields demand/supply flux ``min(D(rho_L), S(rho_R))``."""
    rho_c = spec.rho_max / 2.0
    q_c = spec.flux(rho_c)
    demand = np.where(rho_left <= rho_c, spec.flux(rho_left), q_c)
    supply = np.where(rho_right <= rho_c, q_c, spec.flux(rho_right))
    return np.minimum(demand, supply)


def solve_lwr_godunov(ic, spec: PhysicsSpec, grid: GodunovGrid, boundary: str = "periodic") -> FieldSolution:
    """First-order Godunov scheme for the Greenshields LWR model.

    ``ic`` is an array of ``nx`` cell averages or a callable of cell centres.
    Returns ``nt + 1`` time levels. Requires ``dt <= dx / u_max``.
    """
    max_dt = grid.dx / spec.u_max
    if grid.dt > max_dt * (1 + 1e-12):
        raise CFLViolationError(grid.dt, max_dt)
    if boundary not in ("periodic", "outflow"):
        raise ConfigurationError(f"unknown boundary {boundary!r}")
    centers = grid.centers
    rho = np.asarray(ic(centers) if callable(ic) else ic, dtype=float).copy()
    if rho.shape != (grid.nx,):
        raise ConfigurationError(f"initial condition must have {grid.nx} cells")
    _check_range(spec, rho, np.zeros(1))

    ratio = grid.dt / grid.dx
    out = np.empty((grid.nt + 1, grid.nx))
    out[0] = rho
    for n in range(grid.nt):
        if boundary == "periodic":
            padded = np.concatenate([rho[-1:], rho, rho[:1]])
        else:
            padded = np.concatenate([rho[:1], rho, rho[-1:]])
        F = godunov_flux(spec, padded[:-1], padded[1:])
        rho = rho - ratio * (F[1:] - F[:-1])
        out[n + 1] = rho
    t_grid = np.arange(grid.nt + 1) * grid.dt
    return FieldSolution(centers, t_grid, np.clip(out, 0.0, spec.rho_max), spec.ueq(np.clip(out, 0.0, spec.rho_max)), spec)


def riemann_rarefaction(spec: PhysicsSpec, rho_left, rho_right, xi):
    """Entropy solution of a Greenshields Riemann problem at ``xi = x / t``
    for the rarefaction case ``rho_left > rho_right``."""
    if not rho_left > rho_right:
        raise ConfigurationError("rarefaction needs rho_left > rho_right")
    xi = np.asarray(xi, float)
    lam_l = spec.u_max * (1 - 2 * rho_left / spec.rho_max)
    lam_r = spec.u_max * (1 - 2 * rho_right / spec.rho_max)
    fan = spec.rho_max / 2.0 * (1 - xi / spec.u_max)
    return np.where(xi <= lam_l, rho_left, np.where(xi >= lam_r, rho_right, fan))


# ---------------------------------------------------------------------------
# time averaging
# ---------------------------------------------------------------------------


@dataclass
class AveragedSamples:
    """Window averages centred at ``t_centers`` on the fine x grid."""

    t_centers: np.ndarray
    x_grid: np.ndarray
    rho_bar: np.ndarray
    u_bar: np.ndarray
    dropped: int
    half_steps: int


def _half_steps(delta_t, dt_fine) -> int:
    if delta_t <= 0 or dt_fine <= 0:
        raise ConfigurationError("delta_t and the fine time step must be positive")
    m = delta_t / (2.0 * dt_fine)
    m_int = int(round(m))
    if m_int < 1 or abs(m - m_int) > _GRID_TOL * max(1.0, m):
        raise ConfigurationError(
            f"delta_t = {delta_t} must be an even multiple (>= 2) of the fine step {dt_fine}")
    return m_int


def window_average(values, dt_fine: float, delta_t: float, axis: int = 0):
    """Composite-Simpson mean over ``[t - delta_t/2, t + delta_t/2]``.

    Returns ``(center_index, averages)``; only windows fully inside the
    array are kept, centres are the fine-grid indices ``m .. N-1-m``.
    """
    m = _half_steps(delta_t, dt_fine)
    values = np.moveaxis(np.asarray(values, dtype=float), axis, 0)
    n = values.shape[0]
    if n < 2 * m + 1:
        return np.arange(0), np.empty((0,) + values.shape[1:])
    windows = sliding_window_view(values, 2 * m + 1, axis=0)
    avg = simpson(windows, dx=dt_fine, axis=-1) / (2 * m * dt_fine)
    return np.arange(m, n - m), np.moveaxis(avg, 0, axis)


def time_average(field: FieldSolution, delta_t: float, t_centers=None) -> AveragedSamples:
    """Detector-style averages of rho and u over windows of length ``delta_t``.

    ``t_centers`` defaults to every fine-grid time. Centres must sit on the
    fine grid; windows leaving the time domain are dropped and counted.
    """
    m = _half_steps(delta_t, field.dt)
    idx_all, rho_bar = window_average(field.rho, field.dt, delta_t)
    _, u_bar = window_average(field.u, field.dt, delta_t)
    if t_centers is None:
        dropped = field.t_grid.size - idx_all.size
        return AveragedSamples(field.t_grid[idx_all], field.x_grid, rho_bar, u_bar, dropped, m)

    t_centers = np.atleast_1d(np.asarray(t_centers, float))
    pos = (t_centers - field.t_grid[0]) / field.dt
    idx = np.rint(pos).astype(int)
    if np.any(np.abs(pos - idx) > 1e-6):
        raise ConfigurationError("window centres must lie on the fine time grid")
    keep = (idx - m >= 0) & (idx + m <= field.t_grid.size - 1)
    rows = idx[keep] - m
    return AveragedSamples(field.t_grid[idx[keep]], field.x_grid, rho_bar[rows], u_bar[rows],
                           int((~keep).sum()), m)


# ---------------------------------------------------------------------------
# detector emulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingGeometry:
    """Minimal sensor spacing (m) and reporting interval (s)."""

    delta_x: float
    delta_t: float

    def __post_init__(self):
        if not (self.delta_x > 0 and self.delta_t > 0):
            raise ConfigurationError("delta_x and delta_t must be positive")

    @classmethod
    def from_sensor_count(cls, length: float, n_sensors: int, delta_t: float) -> "SamplingGeometry":
        """Endpoint-inclusive, equally spaced sensors: ``delta_x = length / (n - 1)``."""
        if n_sensors < 2:
            raise ConfigurationError("at least 2 sensors are needed to define a spacing")
        return cls(length / (n_sensors - 1), delta_t)


@dataclass(frozen=True, eq=False)
class DetectorDataset:
    """Time-averaged observations plus collocation points (physical units)."""

    x: np.ndarray
    t: np.ndarray
    rho: np.ndarray
    u: np.ndarray
    geometry: SamplingGeometry
    normalization: Normalization
    collocation: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    station_ids: tuple = ()

    def __post_init__(self):
        for name in ("x", "t", "rho", "u"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        object.__setattr__(self, "collocation", np.asarray(self.collocation, dtype=float).reshape(-1, 2))
        n = self.x.size
        if n < 1:
            raise ConfigurationError("a dataset needs at least one observation")
        if not (self.t.size == self.rho.size == self.u.size == n):
            raise ConfigurationError("observation columns differ in length")
        if self.collocation.size:
            nm = self.normalization
            lo = np.array([nm.x0, nm.t0])
            hi = np.array([nm.x0 + nm.L_x, nm.t0 + nm.L_t])
            tol = 1e-9 * np.maximum(1.0, np.abs(hi))
            if np.any(self.collocation < lo - tol) or np.any(self.collocation > hi + tol):
                raise ConfigurationError("collocation points leave the normalization box")

    @property
    def n_obs(self) -> int:
        return int(self.x.size)

    @property
    def n_coll(self) -> int:
        return int(self.collocation.shape[0])

    def inputs(self) -> np.ndarray:
        return self.normalization.inputs(self.x, self.t)

    def targets(self) -> np.ndarray:
        n = self.normalization
        return np.column_stack([self.rho / n.rho_max, self.u / n.u_max])

    def collocation_inputs(self) -> np.ndarray:
        return self.normalization.inputs(self.collocation[:, 0], self.collocation[:, 1])

    def with_collocation(self, points) -> "DetectorDataset":
        return DetectorDataset(self.x, self.t, self.rho, self.u, self.geometry, self.normalization,
                               points, self.station_ids)

    def subset(self, mask) -> "DetectorDataset":
        mask = np.asarray(mask)
        ids = tuple(np.asarray(self.station_ids, dtype=object)[mask]) if self.station_ids else ()
        return DetectorDataset(self.x[mask], self.t[mask], self.rho[mask], self.u[mask], self.geometry,
                               self.normalization, self.collocation, ids)

    def stations(self):
        """Sorted unique ``(station_id, position)`` pairs."""
        ids = self.station_ids or tuple(f"s{i}" for i in _position_rank(self.x))
        pairs = {}
        for sid, pos in zip(ids, self.x):
            pairs.setdefault(str(sid), float(pos))
        return sorted(pairs.items(), key=lambda kv: kv[1])


def _position_rank(x):
    _, inverse = np.unique(x, return_inverse=True)
    return inverse


def sensor_positions(x_start: float, length: float, delta_x: float) -> np.ndarray:
    count = int(np.floor(length / delta_x + 1e-9)) + 1
    return x_start + delta_x * np.arange(count)


def sparse_sample(fld: FieldSolution, geometry: SamplingGeometry, x_start: float | None = None,
                  length: float | None = None, rho_max: float | None = None,
                  u_max: float | None = None) -> DetectorDataset:
    """Virtual detectors every ``delta_x`` (endpoints included) reporting
    window averages every ``delta_t``.

    Report ``k`` averages ``[t0 + k dt, t0 + (k+1) dt]`` and is stamped at the
    window centre. Values between grid columns are linearly interpolated.
    """
    x_start = float(fld.x_grid[0]) if x_start is None else float(x_start)
    length = float(fld.x_grid[-1]) - x_start if length is None else float(length)
    half = fld.dx / 2 if fld.dx else 0.0
    if x_start < fld.x_grid[0] - half - 1e-9 or x_start + length > fld.x_grid[-1] + half + 1e-9:
        raise ConfigurationError("sensor span exceeds the field's spatial extent")
    positions = sensor_positions(x_start, length, geometry.delta_x)
    if positions.size < 2:
        raise ConfigurationError("geometry places fewer than 2 sensors")
    t0 = float(fld.t_grid[0])
    n_reports = int(np.floor((fld.t_grid[-1] - t0) / geometry.delta_t + 1e-9))
    if n_reports < 1:
        raise ConfigurationError("reporting interval exceeds the simulated horizon")
    centers = t0 + geometry.delta_t * (np.arange(n_reports) + 0.5)
    avg = time_average(fld, geometry.delta_t, centers)

    rho_cols = np.array([np.interp(positions, fld.x_grid, row) for row in avg.rho_bar])
    u_cols = np.array([np.interp(positions, fld.x_grid, row) for row in avg.u_bar])
    T, X = np.meshgrid(avg.t_centers, positions, indexing="ij")
    ids = tuple(f"d{j:02d}" for j in range(positions.size)) * avg.t_centers.size
    spec = fld.spec
    norm = Normalization.from_box(X, T, rho_max or spec.rho_max, u_max or spec.u_max)
    return DetectorDataset(X.ravel(), T.ravel(), rho_cols.ravel(), u_cols.ravel(), geometry, norm,
                           station_ids=ids)


def add_detector_noise(dataset: DetectorDataset, sigma: float, seed: int = 0) -> DetectorDataset:
    """Gaussian measurement noise with std ``sigma * rho_max`` and ``sigma * u_max``.

    Densities are clipped back to ``[0, rho_max]``; geometry, normalization and
    collocation are kept.
    """
    if sigma < 0:
        raise ConfigurationError(f"noise level must be >= 0, got {sigma}")
    if sigma == 0:
        return dataset
    norm = dataset.normalization
    rng = np.random.default_rng(seed)
    rho = np.clip(dataset.rho + sigma * norm.rho_max * rng.standard_normal(dataset.n_obs), 0.0, norm.rho_max)
    u = dataset.u + sigma * norm.u_max * rng.standard_normal(dataset.n_obs)
    return replace(dataset, rho=rho, u=u)


def uniform_collocation(dataset: DetectorDataset) -> np.ndarray:
    """Cartesian n x n grid over the observation bounding box,
    ``n = floor(sqrt(floor(0.8 N_o)))``."""
    n_coll = int(np.floor(0.8 * dataset.n_obs))
    n = int(np.floor(np.sqrt(n_coll)))
    if n < 2:
        raise ConfigurationError(f"only {dataset.n_obs} observations: collocation grid would be {n}x{n}")
    xs = dataset.x.min() + np.arange(n) * (dataset.x.max() - dataset.x.min()) / (n - 1)
    ts = dataset.t.min() + np.arange(n) * (dataset.t.max() - dataset.t.min()) / (n - 1)
    X, T = np.meshgrid(xs, ts, indexing="ij")
    return np.column_stack([X.ravel(), T.ravel()])


# ---------------------------------------------------------------------------
# CSV IO
# ---------------------------------------------------------------------------


def load_detector_csv(path, imperial: bool = False, spec: PhysicsSpec | None = None) -> DetectorDataset:
    """Parse ``station_id,position_m,timestamp_s,speed,density`` rows.

    With ``imperial`` the speed column is mph and density veh/mile. Geometry is
    the minimum spacing between distinct station positions and the minimum
    reporting interval over stations.
    """
    spec = spec or PhysicsSpec()
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader]
    if not rows:
        raise ConfigurationError(f"{path}: empty file")
    header = tuple(c.strip() for c in rows[0])
    if header != CSV_HEADER:
        raise ConfigurationError(f"{path}: line 1: expected header {','.join(CSV_HEADER)}")
    ids, xs, ts, us, rhos = [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 5:
            raise ConfigurationError(f"{path}: line {lineno}: expected 5 fields, got {len(row)}")
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise ConfigurationError(f"{path}: line {lineno}: non-numeric field") from None
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError(f"{path}: line {lineno}: non-finite value")
        ids.append(row[0].strip())
        xs.append(vals[0])
        ts.append(vals[1])
        us.append(vals[2])
        rhos.append(vals[3])
    if not ids:
        raise ConfigurationError(f"{path}: no data rows")
    x, t = np.array(xs), np.array(ts)
    u, rho = np.array(us), np.array(rhos)
    if imperial:
        u = u * MPH_TO_MPS
        rho = rho / METRES_PER_MILE

    intervals = []
    positions = {}
    for sid in dict.fromkeys(ids):
        sel = np.array([i == sid for i in ids])
        times = t[sel]
        steps = np.diff(times)
        if np.any(steps <= 0):
            raise ConfigurationError(f"{path}: timestamps of station {sid!r} are not increasing")
        intervals.extend(steps.tolist())
        pos = np.unique(x[sel])
        if pos.size != 1:
            raise ConfigurationError(f"{path}: station {sid!r} reports more than one position")
        positions[sid] = float(pos[0])
    distinct = np.unique(list(positions.values()))
    if distinct.size < 2:
        raise ConfigurationError(f"{path}: need at least two station positions to define a spatial step")
    if not intervals:
        raise ConfigurationError(f"{path}: need at least two reports per station to define a time step")
    geometry = SamplingGeometry(float(np.min(np.diff(distinct))), float(np.min(intervals)))
    norm = Normalization.from_box(x, t, spec.rho_max, spec.u_max)
    return DetectorDataset(x, t, rho, u, geometry, norm, station_ids=tuple(ids))


def _fmt(v) -> str:
    return repr(float(v))


def write_detector_csv(dataset: DetectorDataset, path) -> Path:
    path = Path(path)
    ids = dataset.station_ids or tuple(f"s{i}" for i in _position_rank(dataset.x))
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for sid, x, t, u, r in zip(ids, dataset.x, dataset.t, dataset.u, dataset.rho):
            w.writerow([sid, _fmt(x), _fmt(t), _fmt(u), _fmt(r)])
    return path


def write_points_csv(points, path, header=("x_m", "t_s")) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.asarray(points, float):
            w.writerow([_fmt(v) for v in row])
    return path


def write_matrix_csv(matrix, row_axis, col_axis, path, row_name="t", col_name="x") -> Path:
    """Matrix with two axis header lines: ``# <col_name>,...`` then ``# <row_name>,...``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# {col_name}," + ",".join(_fmt(v) for v in col_axis) + "\n")
        fh.write(f"# {row_name}," + ",".join(_fmt(v) for v in row_axis) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix, float):
            w.writerow([_fmt(v) for v in row])
    return path


def read_matrix_csv(path):
    lines = Path(path).read_text().splitlines()
    col_axis = np.array([float(v) for v in lines[0].split(",")[1:]])
    row_axis = np.array([float(v) for v in lines[1].split(",")[1:]])
    matrix = np.array([[float(v) for v in line.split(",")] for line in lines[2:] if line])
    return matrix, row_axis, col_axis


def write_field_csv(fld: FieldSolution, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return [
        write_matrix_csv(fld.rho, fld.t_grid, fld.x_grid, directory / "rho.csv"),
        write_matrix_csv(fld.u, fld.t_grid, fld.x_grid, directory / "u.csv"),
    ]

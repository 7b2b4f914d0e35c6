"""Gradient probes, dominance ratio, the cone test and Hessian landscapes.

Probe improvements are measured as the drop in ``err_rho + err_u`` on a
held-out split after a plain gradient step along each direction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import diffengine as ad
from .datahub import DetectorDataset, write_matrix_csv
from .exceptions import ConfigurationError
from .networks import ParamVector
from .physics import PhysicsSpec
from .trainer import (LossGraph, LossWeights, TrainConfig, build_loss, evaluate_errors, fit_params,
                      init_params, split_dataset)

SPAN_TOL = 1e-8
ANGLE_TOL = 1e-9


# ---------------------------------------------------------------------------
# gradient triplets and probes
# ---------------------------------------------------------------------------


@dataclass
class GradientTriplet:
    """``g_t`` of the weighted total, ``g_d`` / ``g_p`` of the unweighted pieces.

    With ``alpha = alpha1`` and ``beta = beta1``: ``g_t = alpha g_d + beta g_p``.
    """

    g_t: np.ndarray
    g_d: np.ndarray
    g_p: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        self.g_t, self.g_d, self.g_p = (np.asarray(g, float).ravel() for g in (self.g_t, self.g_d, self.g_p))
        if not (self.g_t.shape == self.g_d.shape == self.g_p.shape):
            raise ConfigurationError("gradient triplet components differ in length")

    def linearity_gap(self) -> float:
        return float(np.max(np.abs(self.g_t - (self.alpha * self.g_d + self.beta * self.g_p))))


class TripletProgram:
    """Compiled gradients of total, data and physics pieces of one LossGraph."""

    def __init__(self, loss: LossGraph):
        self.loss = loss
        g_d = ad.gradient(loss.data_term(), loss.variables)
        g_p = ad.gradient(loss.physics_term(), loss.variables)
        self._pieces = ad.Program(list(g_d) + list(g_p))
        self._n = len(loss.variables)

    def __call__(self, params: ParamVector, g_t=None) -> GradientTriplet:
        if g_t is None:
            _, g_t = self.loss.value_and_grad(params)
        out = self._pieces.run(params.as_dict())
        g_d = np.concatenate([np.ravel(g) for g in out[:self._n]])
        g_p = np.concatenate([np.ravel(g) for g in out[self._n:]])
        w = self.loss.weights
        return GradientTriplet(g_t, g_d, g_p, w.alpha1, w.beta1)


def gradient_triplet(params: ParamVector, dataset: DetectorDataset, spec: PhysicsSpec,
                     weights: LossWeights, config: TrainConfig | None = None) -> GradientTriplet:
    """Gradients of the weighted total, unweighted data and unweighted physics losses."""
    loss = build_loss(params, dataset, spec, weights, config, with_physics=dataset.n_coll > 0)
    return TripletProgram(loss)(params)


class ProbeReport(NamedTuple):
    imp_total: float
    imp_data: float
    imp_physics: float
    dominant: bool
    committed: np.ndarray


def probe_step(params, triplet: GradientTriplet, eta: float, metric: Callable,
               precondition: Callable | None = None) -> ProbeReport:
    """Improvement of ``metric`` after ``theta - eta g`` for g in (g_t, g_d, g_p).

    ``params`` is a ParamVector or a flat array; ``metric`` receives the same
    kind. ``precondition`` maps a gradient to the direction actually stepped
    (Adam probes). The committed update is always the total-gradient step.
    """
    if eta < 0:
        raise ConfigurationError("eta must be non-negative")
    is_pv = isinstance(params, ParamVector)
    theta = params.flatten() if is_pv else np.asarray(params, float)
    wrap = params.unflatten if is_pv else (lambda v: v)
    base = metric(params)
    direction = precondition or (lambda g: g)
    steps = [theta - eta * direction(g) for g in (triplet.g_t, triplet.g_d, triplet.g_p)]
    imps = [base - metric(wrap(s)) if eta > 0 else 0.0 for s in steps]
    dominant = imps[0] > imps[1] and imps[0] > imps[2]
    return ProbeReport(float(imps[0]), float(imps[1]), float(imps[2]), bool(dominant), steps[0])


def dominance_ratio(log: Sequence) -> float:
    """Fraction of probed iterations where the total step strictly wins."""
    if len(log) == 0:
        raise ConfigurationError("dominance ratio needs at least one probed iteration")
    wins = 0
    for entry in log:
        if isinstance(entry, dict):
            wins += bool(entry["dominant"])
        else:
            wins += bool(entry.dominant)
    return wins / len(log)


@dataclass
class GradDiagResult:
    log: list
    ratio: float
    params: ParamVector
    history: object


def run_graddiag(dataset: DetectorDataset, spec: PhysicsSpec, weights: LossWeights,
                 config: TrainConfig = TrainConfig(), probe_every: int = 1,
                 adam_probes: bool = False) -> GradDiagResult:
    """Train while probing the three directions every ``probe_every`` epochs."""
    if probe_every < 1:
        raise ConfigurationError("probe_every must be >= 1")
    train_set, test_set = split_dataset(dataset, config.test_fraction)
    arch = config.architecture or spec.family
    params = init_params(arch, config.seed, config.tau_init)
    loss = build_loss(params, train_set, spec, weights, config, with_physics=train_set.n_coll > 0)
    triplets = TripletProgram(loss)

    def metric(p):
        er, eu = evaluate_errors(p, test_set, arch, config.fd_output)
        return er + eu

    log = []

    def callback(epoch, current, grad, opt):
        if epoch % probe_every:
            return
        trip = triplets(current, grad)
        pre = opt.direction if adam_probes else None
        rep = probe_step(current, trip, config.learning_rate, metric, pre)
        log.append({"iter": epoch, "imp_total": rep.imp_total, "imp_data": rep.imp_data,
                    "imp_physics": rep.imp_physics, "dominant": rep.dominant})

    final, history = fit_params(loss, params, config, callback)
    ratio = dominance_ratio(log) if log else 0.0
    return GradDiagResult(log, ratio, final, history)


def write_dominance_csv(log, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "imp_total", "imp_data", "imp_physics", "dominant"])
        for e in log:
            w.writerow([e["iter"], repr(e["imp_total"]), repr(e["imp_data"]), repr(e["imp_physics"]),
                        int(e["dominant"])])
    return path


# ---------------------------------------------------------------------------
# cone test
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConeTestResult:
    """Least-squares split ``g_q ~ a g_d + b g_p`` and the positivity checks.

    ``satisfied`` is the stated sufficient condition. ``improvable`` is the
    exact condition for some convex mix ``alpha g_d + (1 - alpha) g_p`` to be
    strictly closer in angle to ``g_q`` than both endpoints: ``a > 0`` and
    ``b > 0`` for the projection of ``g_q`` onto span(g_d, g_p).
    """

    in_span: bool
    a: float
    b: float
    dot_d: float
    dot_p: float
    satisfied: bool
    improvable: bool
    alpha_star: float | None
    residual: float
    degenerate: bool = False


def cone_test(g_d, g_p, g_q, span_tol: float = SPAN_TOL) -> ConeTestResult:
    g_d, g_p, g_q = (np.asarray(v, float).ravel() for v in (g_d, g_p, g_q))
    if not (g_d.shape == g_p.shape == g_q.shape):
        raise ConfigurationError("vectors differ in length")
    if min(np.linalg.norm(g_d), np.linalg.norm(g_p), np.linalg.norm(g_q)) == 0:
        raise ConfigurationError("cone test needs nonzero vectors")
    A = np.column_stack([g_d, g_p])
    coef, _, rank, _ = np.linalg.lstsq(A, g_q, rcond=None)
    degenerate = rank < 2
    a, b = float(coef[0]), float(coef[1])
    residual = float(np.linalg.norm(A @ coef - g_q))
    in_span = residual <= span_tol * np.linalg.norm(g_q)
    dot_d, dot_p = float(g_d @ g_q), float(g_p @ g_q)
    satisfied = bool(in_span and a > 0 and b > 0 and dot_d > 0 and dot_p > 0) and not degenerate
    improvable = bool(a > 0 and b > 0) and not degenerate
    # g(alpha) is parallel to the projection when alpha / (1 - alpha) = a / b
    alpha_star = a / (a + b) if improvable else None
    return ConeTestResult(bool(in_span), a, b, dot_d, dot_p, satisfied, improvable, alpha_star,
                          residual, bool(degenerate))


def _angle(u, v):
    c = float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def alpha_grid_search(g_d, g_p, g_q, n: int = 10_000, tol: float = ANGLE_TOL):
    """Dense search over interior alpha; returns ``(found, best_alpha, margin)``.

    ``found`` means some ``g(alpha)`` is at least ``tol`` radians closer to
    ``g_q`` than both ``g_d`` and ``g_p``.
    """
    g_d, g_p, g_q = (np.asarray(v, float).ravel() for v in (g_d, g_p, g_q))
    alphas = (np.arange(n) + 0.5) / n
    G = alphas[:, None] * g_d + (1 - alphas[:, None]) * g_p
    norms = np.linalg.norm(G, axis=1)
    ok = norms > 0
    cos = np.full(n, -1.0)
    cos[ok] = (G[ok] @ g_q) / (norms[ok] * np.linalg.norm(g_q))
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    bound = min(_angle(g_d, g_q), _angle(g_p, g_q))
    i = int(np.argmin(angles))
    margin = bound - float(angles[i])
    return margin > tol, float(alphas[i]), margin


# ---------------------------------------------------------------------------
# Hessian eigenpairs
# ---------------------------------------------------------------------------


@dataclass
class HessianTop2:
    v1: np.ndarray
    lambda1: float
    v2: np.ndarray
    lambda2: float
    converged: bool
    iterations: tuple
    residuals: tuple

    def __iter__(self):
        return iter((self.v1, self.lambda1, self.v2, self.lambda2))


def _power(op, n, rng, tol, max_iter, deflate=None):
    v = rng.standard_normal(n)
    if deflate is not None:
        v -= (deflate @ v) * deflate
    v /= np.linalg.norm(v)
    lam = None
    for k in range(1, max_iter + 1):
        w = op(v)
        if deflate is not None:
            w -= (deflate @ w) * deflate
        new_lam = float(v @ w)
        res = float(np.linalg.norm(w - new_lam * v))
        norm = np.linalg.norm(w)
        if norm == 0:
            return v, 0.0, True, k, 0.0
        scale = max(1.0, abs(new_lam))
        if lam is not None and abs(new_lam - lam) < tol * scale and res <= 1e-4 * scale:
            return v, new_lam, True, k, res
        lam = new_lam
        v = w / norm
        if deflate is not None:
            v -= (deflate @ v) * deflate
            v /= np.linalg.norm(v)
    return v, lam, False, max_iter, res


def hessian_top2(hvp: Callable, n: int, seed: int = 0, tol: float = 1e-6, max_iter: int = 1000) -> HessianTop2:
    """Two dominant eigenpairs of ``v -> H v`` by power iteration and deflation.

    Stops when the Rayleigh quotient changes by less than ``tol * max(1, |lambda|)``
    and the residual is at most ``1e-4 * max(1, |lambda|)``. Non-convergence is
    reported through ``converged`` and the last Rayleigh quotient.
    """
    if n < 2:
        raise ConfigurationError("need at least two parameters for two eigenpairs")
    rng = np.random.default_rng(seed)
    v1, l1, c1, k1, r1 = _power(hvp, n, rng, tol, max_iter)
    v2, l2, c2, k2, r2 = _power(hvp, n, rng, tol, max_iter, deflate=v1)
    v2 = v2 - (v1 @ v2) * v1
    v2 /= np.linalg.norm(v2)
    if l2 > l1:
        # power iteration ranks by |lambda|; report in descending value
        v1, l1, k1, r1, v2, l2, k2, r2 = v2, l2, k2, r2, v1, l1, k1, r1
    return HessianTop2(v1, l1, v2, l2, c1 and c2, (k1, k2), (r1, r2))


def loss_hvp(loss: LossGraph, params: ParamVector) -> Callable:
    """Flat ``v -> H v`` of the total loss at ``params``."""
    op = ad.HVPOperator(loss.total, loss.variables)
    bindings = params.as_dict()

    def apply(v):
        for var in loss.variables:
            var.bind(bindings[var.name])
        return op(v)

    return apply


def loss_function(loss: LossGraph, template: ParamVector) -> Callable:
    """Flat ``theta -> total loss`` reusing one compiled program."""
    program = ad.Program([loss.total])

    def f(theta):
        return float(program.run(template.unflatten(theta).as_dict())[0])

    return f


# ---------------------------------------------------------------------------
# landscape
# ---------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    v1: np.ndarray
    v2: np.ndarray
    lambda1: float
    lambda2: float
    eps1: np.ndarray
    eps2: np.ndarray
    losses: np.ndarray = field(repr=False)

    @property
    def center(self) -> float:
        mid = self.eps1.size // 2
        return float(self.losses[mid, mid])

    @property
    def center_gap(self) -> float:
        """``L(center) - min(grid)``; zero when the centre is the grid minimum."""
        return self.center - float(np.min(self.losses))


def landscape_grid(loss_fn: Callable, center, v1, v2, delta: float = 0.5, resolution: int = 41,
                   lambda1: float = float("nan"), lambda2: float = float("nan")) -> LandscapeGrid:
    """``loss_fn(center + e1 v1 + e2 v2)`` on a ``resolution``^2 lattice over [-delta, delta]^2."""
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigurationError("resolution must be odd and >= 3")
    if delta < 0:
        raise ConfigurationError("delta must be non-negative")
    center = np.asarray(center, float)
    v1, v2 = np.asarray(v1, float), np.asarray(v2, float)
    if abs(np.linalg.norm(v1) - 1) > 1e-8 or abs(np.linalg.norm(v2) - 1) > 1e-8:
        raise ConfigurationError("direction vectors must be unit length")
    if abs(v1 @ v2) > 1e-6:
        raise ConfigurationError("direction vectors must be orthogonal")
    mid = resolution // 2
    eps = (np.arange(resolution) - mid) * (delta / mid)
    losses = np.empty((resolution, resolution))
    for i, e1 in enumerate(eps):
        for j, e2 in enumerate(eps):
            losses[i, j] = loss_fn(center + e1 * v1 + e2 * v2)
    return LandscapeGrid(v1, v2, float(lambda1), float(lambda2), eps, eps.copy(), losses)


def write_landscape_csv(grid: LandscapeGrid, path) -> Path:
    return write_matrix_csv(grid.losses, grid.eps1, grid.eps2, path, row_name="eps1", col_name="eps2")

"""Hybrid-loss training, relative L2 errors, beta sweeps and the failure test.

The loss is built once as an expression graph over the observation inputs and
the collocation inputs; every epoch only rebinds the parameter variables.

Data terms compare normalized predictions with normalized targets. Physics
terms use SI residuals (veh/m/s, m/s^2) by default; ``residual_units="scaled"``
switches to the O(1) normalized form.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import diffengine as ad
from .datahub import DetectorDataset, uniform_collocation
from .exceptions import ConfigurationError, DivergenceError
from .networks import NetworkGraph, ParamVector, init_params
from .physics import Normalization, PhysicsSpec, arz_residual_expr, lwr_residual_expr

BETA_SWEEP = (0, 1, 10, 30, 50, 80, 100, 120, 150, 180, 200, 500, 1000, 5000, 10000)
FAILURE_THRESHOLD = 0.01
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class LossWeights:
    """alpha: data-term weights; beta: physics-term weights (beta2 is ARZ only)."""

    alpha1: float = 100.0
    alpha2: float = 100.0
    beta1: float = 0.0
    beta2: float | None = None

    def __post_init__(self):
        if self.beta2 is None:
            object.__setattr__(self, "beta2", self.beta1)
        if min(self.alpha1, self.alpha2, self.beta1, self.beta2) < 0:
            raise ConfigurationError("loss weights must be non-negative")

    @classmethod
    def with_beta(cls, beta: float, alpha: float = 100.0) -> "LossWeights":
        return cls(alpha, alpha, float(beta), float(beta))

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.alpha1 * c, self.alpha2 * c, self.beta1 * c, self.beta2 * c)

    @property
    def physics_active(self) -> bool:
        return self.beta1 > 0 or self.beta2 > 0


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 5000
    optimizer: str = "adam"
    seed: int = 0
    repeats: int = 3
    test_fraction: float = 0.2
    fd_output: str = "speed"
    tau_init: float = 1.0
    residual_units: str = "physical"
    architecture: str | None = None
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 < self.test_fraction < 1:
            raise ConfigurationError("test_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def relative_l2(pred, truth) -> float:
    """``sum |pred - truth|^2 / sum |truth|^2`` (squared sums, no square root)."""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape or pred.size == 0:
        raise ConfigurationError("pred and truth must have equal, non-zero length")
    denom = float(np.sum(truth ** 2))
    if denom == 0.0:
        raise ConfigurationError("truth is identically zero")
    return float(np.sum((pred - truth) ** 2) / denom)


class FailureVerdict(NamedTuple):
    improvement_rho: float
    improvement_u: float | None
    verdict: str

    @property
    def percent_rho(self) -> float:
        return 100.0 * self.improvement_rho

    @property
    def percent_u(self) -> float | None:
        return None if self.improvement_u is None else 100.0 * self.improvement_u


def improvement(e_piml: float, e_ml: float, e_pm: float) -> float:
    """Relative gain of the hybrid model over the better pure model."""
    errs = (e_piml, e_ml, e_pm)
    if min(errs) <= 0 or not np.all(np.isfinite(errs)):
        raise ConfigurationError("errors must be positive and finite")
    best = min(e_ml, e_pm)
    return (best - e_piml) / abs(best)


def failure_test(e_piml, e_ml, e_pm, threshold: float = FAILURE_THRESHOLD) -> FailureVerdict:
    """Failure iff improvement <= threshold.

    Scalars test one metric. Pairs ``(err_rho, err_u)`` test both; the model
    succeeds only if both improvements exceed the threshold.
    """
    if np.ndim(e_piml) == 0:
        imp = improvement(e_piml, e_ml, e_pm)
        return FailureVerdict(imp, None, "failure" if imp <= threshold else "success")
    imp_r = improvement(e_piml[0], e_ml[0], e_pm[0])
    imp_u = improvement(e_piml[1], e_ml[1], e_pm[1])
    ok = imp_r > threshold and imp_u > threshold
    return FailureVerdict(imp_r, imp_u, "success" if ok else "failure")


def truncate(value: float, decimals: int) -> float:
    """Round toward zero at ``decimals`` places."""
    scale = 10.0 ** decimals
    return float(np.trunc(np.round(value * scale, 6)) / scale)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def hash_split(x, t, test_fraction: float = 0.2) -> np.ndarray:
    """Boolean test mask from a BLAKE2 hash of each (x, t) pair."""
    x = np.asarray(x, dtype="<f8").ravel()
    t = np.asarray(t, dtype="<f8").ravel()
    mask = np.empty(x.size, dtype=bool)
    for i in range(x.size):
        digest = hashlib.blake2b(x[i].tobytes() + t[i].tobytes(), digest_size=8).digest()
        mask[i] = int.from_bytes(digest, "little") / 2.0 ** 64 < test_fraction
    return mask


def split_dataset(dataset: DetectorDataset, test_fraction: float = 0.2):
    mask = hash_split(dataset.x, dataset.t, test_fraction)
    if mask.all() or not mask.any():
        raise ConfigurationError("hash split left one side empty; dataset too small")
    return dataset.subset(~mask), dataset.subset(mask)


# ---------------------------------------------------------------------------
# loss graph
# ---------------------------------------------------------------------------


class LossParts(NamedTuple):
    total: float
    data: float
    physics: float


class LossGraph:
    """Expression graph of the hybrid loss at a parameter layout.

    ``terms`` holds the unweighted pieces ``data_rho``, ``data_u``,
    ``phys_1`` and (ARZ) ``phys_2``; ``total`` is their weighted sum.
    """

    def __init__(self, params: ParamVector, obs_inputs, obs_targets, coll_inputs, spec: PhysicsSpec,
                 weights: LossWeights, norm: Normalization, architecture: str | None = None,
                 fd_output: str = "speed", units: str = "physical", with_physics: bool | None = None):
        self.architecture = architecture or spec.family
        self.weights = weights
        self.graph = NetworkGraph(params, fd_output)
        fields = self.graph.fields(self.architecture)
        obs_inputs = np.asarray(obs_inputs, float)
        obs_targets = np.asarray(obs_targets, float)
        if obs_inputs.shape[0] < 1:
            raise ConfigurationError("no observations")
        rho_hat, u_hat = fields(ad.Constant(obs_inputs))
        r_err = rho_hat - ad.Constant(obs_targets[:, 0:1])
        u_err = u_hat - ad.Constant(obs_targets[:, 1:2])
        self.terms = {"data_rho": ad.mean(r_err * r_err), "data_u": ad.mean(u_err * u_err)}

        if with_physics is None:
            with_physics = weights.physics_active
        coll_inputs = np.asarray(coll_inputs, float).reshape(-1, 2)
        if weights.physics_active and coll_inputs.shape[0] == 0:
            raise ConfigurationError("physics weight > 0 but the dataset has no collocation points")
        if with_physics and coll_inputs.shape[0]:
            X = ad.Variable("X_coll", coll_inputs)
            if spec.family == "lwr":
                res = lwr_residual_expr(fields, X, spec, norm, units)
            else:
                tau = self.graph.tau() if (self.graph.has_tau and spec.tau_mode == "trainable") else None
                ueq = self.graph.fdl if self.architecture == "arz" else None
                res = arz_residual_expr(fields, X, spec, norm, units, ueq=ueq, tau=tau)
            self.terms["phys_1"] = ad.mean(res.f1 * res.f1)
            if res.f2 is not None:
                self.terms["phys_2"] = ad.mean(res.f2 * res.f2)

        w = {"data_rho": weights.alpha1, "data_u": weights.alpha2,
             "phys_1": weights.beta1, "phys_2": weights.beta2}
        total = None
        for name, term in self.terms.items():
            if w[name] == 0:
                continue
            piece = term * w[name]
            total = piece if total is None else total + piece
        self.total = total if total is not None else ad.Constant(0.0)
        self.variables = self.graph.variables
        self._train_program = None

    def data_term(self) -> ad.Expr:
        """``data_rho + (alpha2/alpha1) data_u`` so that alpha1 * this is the weighted data loss."""
        a1, a2 = self.weights.alpha1, self.weights.alpha2
        ratio = a2 / a1 if a1 > 0 else 1.0
        return self.terms["data_rho"] + self.terms["data_u"] * ratio

    def physics_term(self) -> ad.Expr:
        if "phys_1" not in self.terms:
            return ad.Constant(0.0)
        b1, b2 = self.weights.beta1, self.weights.beta2
        if "phys_2" not in self.terms:
            return self.terms["phys_1"]
        ratio = b2 / b1 if b1 > 0 else 1.0
        return self.terms["phys_1"] + self.terms["phys_2"] * ratio

    def parts(self, params: ParamVector) -> LossParts:
        outs = [self.total, self.data_term(), self.physics_term()]
        values = ad.Program(outs).run(params.as_dict())
        a1, b1 = self.weights.alpha1, self.weights.beta1
        return LossParts(float(values[0]), float(a1 * values[1]), float(b1 * values[2]))

    def train_program(self) -> ad.Program:
        if self._train_program is None:
            grads = ad.gradient(self.total, self.variables)
            loss_outs = [self.total, self.data_term(), self.physics_term()]
            self._train_program = ad.Program(loss_outs + list(grads))
        return self._train_program

    def value_and_grad(self, params: ParamVector):
        out = self.train_program().run(params.as_dict())
        a1, b1 = self.weights.alpha1, self.weights.beta1
        parts = LossParts(float(out[0]), float(a1 * out[1]), float(b1 * out[2]))
        flat = np.concatenate([np.ravel(g) for g in out[3:]])
        return parts, flat


def build_loss(params, dataset: DetectorDataset, spec, weights, config: TrainConfig | None = None,
               with_physics=None) -> LossGraph:
    config = config or TrainConfig()
    return LossGraph(params, dataset.inputs(), dataset.targets(), dataset.collocation_inputs(), spec,
                     weights, dataset.normalization, config.architecture, config.fd_output,
                     config.residual_units, with_physics)


def hybrid_loss(params: ParamVector, dataset: DetectorDataset, spec: PhysicsSpec, weights: LossWeights,
                config: TrainConfig | None = None) -> LossParts:
    """``(total, weighted data term, weighted physics term)`` over all observations."""
    return build_loss(params, dataset, spec, weights, config).parts(params)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, size, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.k = 0

    def step(self, theta, grad):
        self.k += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        m_hat = self.m / (1 - self.b1 ** self.k)
        v_hat = self.v / (1 - self.b2 ** self.k)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def direction(self, grad):
        """Preconditioned direction the next step would take (state untouched)."""
        k = self.k + 1
        m = self.b1 * self.m + (1 - self.b1) * grad
        v = self.b2 * self.v + (1 - self.b2) * grad * grad
        return (m / (1 - self.b1 ** k)) / (np.sqrt(v / (1 - self.b2 ** k)) + self.eps)


class SGD:
    def __init__(self, size, lr=1e-3):
        self.lr = lr

    def step(self, theta, grad):
        return theta - self.lr * grad

    def direction(self, grad):
        return grad


def make_optimizer(config: TrainConfig, size: int):
    if config.optimizer == "adam":
        return Adam(size, config.learning_rate, config.adam_betas, config.adam_eps)
    return SGD(size, config.learning_rate)


@dataclass
class FitHistory:
    total: list = field(default_factory=list)
    data: list = field(default_factory=list)
    physics: list = field(default_factory=list)
    diverged: bool = False
    diverged_epoch: int | None = None

    def as_arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in ("total", "data", "physics")}


def fit_params(loss: LossGraph, params: ParamVector, config: TrainConfig, callback=None,
               raise_on_divergence: bool = False):
    """Full-batch optimisation; returns ``(params, FitHistory)``.

    ``callback(epoch, params, flat_grad, optimizer)`` runs before each update.
    A non-finite loss or gradient stops the run and marks it diverged.
    """
    theta = params.flatten()
    opt = make_optimizer(config, theta.size)
    history = FitHistory()
    current = params
    for epoch in range(config.epochs):
        parts, grad = loss.value_and_grad(current)
        if not (np.isfinite(parts.total) and np.all(np.isfinite(grad))):
            history.diverged, history.diverged_epoch = True, epoch
            if raise_on_divergence:
                raise DivergenceError(epoch, parts.total)
            break
        history.total.append(parts.total)
        history.data.append(parts.data)
        history.physics.append(parts.physics)
        if callback is not None:
            callback(epoch, current, grad, opt)
        theta = opt.step(theta, grad)
        current = params.unflatten(theta)
    return current, history


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------


class TrafficPINN(BaseEstimator, RegressorMixin):
    """Physics-informed regressor mapping ``(x, t)`` to ``(rho, u)``.

    ``X`` columns are position (m) and time (s); ``y`` columns are density
    (veh/m) and speed (m/s). ``beta1 = beta2 = 0`` gives the pure data-driven
    PUNN, ``alpha1 = alpha2 = 0`` the pure physics-driven model.
    """

    def __init__(self, family="lwr", alpha1=100.0, alpha2=100.0, beta1=0.0, beta2=None,
                 learning_rate=1e-3, epochs=5000, optimizer="adam", seed=0, u_max=30.0, rho_max=0.15,
                 pressure="linear", tau_mode="trainable", tau_init=1.0, fd_output="speed",
                 residual_units="physical", architecture=None):
        self.family = family
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta1 = beta1
        self.beta2 = beta2
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.optimizer = optimizer
        self.seed = seed
        self.u_max = u_max
        self.rho_max = rho_max
        self.pressure = pressure
        self.tau_mode = tau_mode
        self.tau_init = tau_init
        self.fd_output = fd_output
        self.residual_units = residual_units
        self.architecture = architecture

    # helpers ---------------------------------------------------------------
    def _spec(self):
        return PhysicsSpec(self.family, u_max=self.u_max, rho_max=self.rho_max, pressure=self.pressure,
                           tau_mode=self.tau_mode, tau=self.tau_init)

    def _weights(self):
        return LossWeights(self.alpha1, self.alpha2, self.beta1, self.beta2)

    def _config(self):
        return TrainConfig(self.learning_rate, self.epochs, self.optimizer, self.seed, 1,
                           fd_output=self.fd_output, tau_init=self.tau_init,
                           residual_units=self.residual_units, architecture=self.architecture)

    def fit(self, X, y, collocation=None, normalization: Normalization | None = None):
        X = check_array(X, dtype=np.float64)
        y = check_array(y, dtype=np.float64)
        if X.shape[1] != 2 or y.shape[1] != 2 or X.shape[0] != y.shape[0]:
            raise ConfigurationError("X must be (n, 2) of (x, t) and y (n, 2) of (rho, u)")
        spec, weights, config = self._spec(), self._weights(), self._config()
        norm = normalization or Normalization.from_box(X[:, 0], X[:, 1], spec.rho_max, spec.u_max)
        if collocation is None and weights.physics_active:
            proto = _dataset_from_arrays(X, y, norm)
            collocation = uniform_collocation(proto)
        coll = np.empty((0, 2)) if collocation is None else check_array(collocation, dtype=np.float64)
        obs_in = norm.inputs(X[:, 0], X[:, 1])
        targets = np.column_stack([y[:, 0] / norm.rho_max, y[:, 1] / norm.u_max])
        coll_in = norm.inputs(coll[:, 0], coll[:, 1]) if coll.size else np.empty((0, 2))

        arch = config.architecture or spec.family
        params = init_params(arch, self.seed, self.tau_init)
        loss = LossGraph(params, obs_in, targets, coll_in, spec, weights, norm, arch,
                         config.fd_output, config.residual_units)
        self.params_, history = fit_params(loss, params, config)
        self.history_ = history
        self.normalization_ = norm
        self.architecture_ = arch
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return predict_fields(self.params_, X, self.normalization_, self.architecture_, self.fd_output)

    def score(self, X, y, sample_weight=None):
        """Negative summed relative L2 error of rho and u (higher is better)."""
        y = check_array(y, dtype=np.float64)
        pred = self.predict(X)
        return -(relative_l2(pred[:, 0], y[:, 0]) + relative_l2(pred[:, 1], y[:, 1]))


def _dataset_from_arrays(X, y, norm):
    from .datahub import SamplingGeometry

    return DetectorDataset(X[:, 0], X[:, 1], y[:, 0], y[:, 1], SamplingGeometry(1.0, 1.0), norm)


def predict_fields(params: ParamVector, X, norm: Normalization, architecture: str,
                   fd_output: str = "speed") -> np.ndarray:
    """Physical ``(rho, u)`` predictions at physical ``(x, t)``."""
    X = np.asarray(X, float).reshape(-1, 2)
    graph = NetworkGraph(params, fd_output)
    rho, u = graph.fields(architecture)(ad.Constant(norm.inputs(X[:, 0], X[:, 1])))
    return np.column_stack([rho.value[:, 0] * norm.rho_max, u.value[:, 0] * norm.u_max])


def evaluate_errors(params, dataset: DetectorDataset, architecture, fd_output="speed"):
    pred = predict_fields(params, np.column_stack([dataset.x, dataset.t]), dataset.normalization,
                          architecture, fd_output)
    return relative_l2(pred[:, 0], dataset.rho), relative_l2(pred[:, 1], dataset.u)


# ---------------------------------------------------------------------------
# train / sweep
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ParamVector
    history: list
    err_rho: list
    err_u: list
    diverged: list
    all_params: list = field(repr=False, default_factory=list)

    @property
    def err_rho_mean(self):
        return float(np.mean(self.err_rho))

    @property
    def err_rho_std(self):
        return float(np.std(self.err_rho))

    @property
    def err_u_mean(self):
        return float(np.mean(self.err_u))

    @property
    def err_u_std(self):
        return float(np.std(self.err_u))

    @property
    def losses(self):
        """Per-epoch ``{total, data, physics}`` of the first repeat."""
        return self.history[0].as_arrays()

    def summary(self):
        return {"err_rho_mean": self.err_rho_mean, "err_rho_std": self.err_rho_std,
                "err_u_mean": self.err_u_mean, "err_u_std": self.err_u_std,
                "diverged": [bool(d) for d in self.diverged]}


def train(dataset: DetectorDataset, spec: PhysicsSpec, weights: LossWeights,
          config: TrainConfig = TrainConfig(), split=None) -> TrainResult:
    """Train ``repeats`` times (seeds ``seed .. seed+repeats-1``) and score on the test split.

    ``split`` may pass a precomputed ``(train_set, test_set)``.
    """
    train_set, test_set = split or split_dataset(dataset, config.test_fraction)
    arch = config.architecture or spec.family
    errs_r, errs_u, hist, finals, div = [], [], [], [], []
    loss = None
    for r in range(config.repeats):
        params = init_params(arch, config.seed + r, config.tau_init)
        if loss is None:
            loss = build_loss(params, train_set, spec, weights, config)
        final, h = fit_params(loss, params, config)
        er, eu = evaluate_errors(final, test_set, arch, config.fd_output)
        errs_r.append(er)
        errs_u.append(eu)
        hist.append(h)
        finals.append(final)
        div.append(h.diverged)
    return TrainResult(finals[0], hist, errs_r, errs_u, div, finals)


@dataclass
class SweepResult:
    best_beta: float
    best_weights: LossWeights
    table: list
    results: dict = field(repr=False, default_factory=dict)

    def rows(self):
        return [[row["beta"], row["err_rho_mean"], row["err_rho_std"], row["err_u_mean"], row["err_u_std"]]
                for row in self.table]


SWEEP_COLUMNS = ("beta", "err_rho_mean", "err_rho_std", "err_u_mean", "err_u_std")


def _run_one(args):
    dataset, spec, weights, config, split = args
    return train(dataset, spec, weights, config, split)


def select_best(table: Sequence[dict]) -> dict:
    """Row minimizing ``err_rho_mean + err_u_mean``; ties go to the smallest beta."""
    finite = [r for r in table if np.isfinite(r["err_rho_mean"] + r["err_u_mean"])]
    if not finite:
        raise ConfigurationError("every sweep run diverged")
    return min(finite, key=lambda r: (r["err_rho_mean"] + r["err_u_mean"], r["beta"]))


def sweep_beta(dataset: DetectorDataset, spec: PhysicsSpec, config: TrainConfig = TrainConfig(),
               betas: Sequence[float] = BETA_SWEEP, alpha: float = 100.0, jobs: int = 1) -> SweepResult:
    """Train one model per beta (beta1 = beta2) and pick the best on the held-out split."""
    split = split_dataset(dataset, config.test_fraction)
    weights = [LossWeights.with_beta(b, alpha) for b in betas]
    tasks = [(dataset, spec, w, config, split) for w in weights]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    table = []
    for b, res in zip(betas, results):
        row = {"beta": float(b), **{k: v for k, v in res.summary().items() if k != "diverged"}}
        if any(res.diverged):
            row["err_rho_mean"] = row["err_u_mean"] = float("inf")
        table.append(row)
    best = select_best(table)
    idx = [r["beta"] for r in table].index(best["beta"])
    return SweepResult(best["beta"], weights[idx], table, dict(zip((float(b) for b in betas), results)))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["adam_betas"] = list(config.adam_betas)
    return d


def with_epochs(config: TrainConfig, epochs: int) -> TrainConfig:
    return replace(config, epochs=epochs)

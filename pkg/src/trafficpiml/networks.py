"""PUNN multilayer perceptrons and the fundamental-diagram (FD) learner.

LWR-PINN: ``rho = PUNN(x, t)`` and ``u = FDL(rho)``.
ARZ-PINN: ``(rho, u) = PUNN(x, t)``; the FD learner supplies the equilibrium
speed inside the momentum residual, and the relaxation time is trainable.

Inputs are normalized coordinates in [0, 1]^2 and outputs are normalized by
``rho_max`` / ``u_max``. All parameters live in a :class:`ParamVector`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffengine as ad
from .exceptions import ConfigurationError

FAMILIES = ("lwr", "arz")
FD_OUTPUTS = ("speed", "flow")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_width < 1:
            raise ConfigurationError("hidden_layers and hidden_width must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError("input and output dimensions must be >= 1")
        if self.activation != "tanh":
            raise ConfigurationError(f"unsupported activation {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return int(sum(i * o + o for i, o in self.layer_shapes))

    def with_seed(self, seed: int) -> "MlpConfig":
        return MlpConfig(self.input_dim, self.output_dim, self.hidden_layers,
                         self.hidden_width, self.activation, seed)


LWR_PUNN = MlpConfig(input_dim=2, output_dim=1, hidden_layers=8, hidden_width=20)
ARZ_PUNN = MlpConfig(input_dim=2, output_dim=2, hidden_layers=8, hidden_width=20)
FD_LEARNER = MlpConfig(input_dim=1, output_dim=1, hidden_layers=2, hidden_width=20)

PRESETS = {"lwr": (LWR_PUNN, FD_LEARNER), "arz": (ARZ_PUNN, FD_LEARNER)}


def init(config: MlpConfig) -> list[np.ndarray]:
    """Weights ~ N(0, 1/fan_in), zero biases; ``[W0, b0, W1, b1, ...]``."""
    rng = np.random.default_rng(config.seed)
    arrays = []
    for fan_in, fan_out in config.layer_shapes:
        arrays.append(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in))
        arrays.append(np.zeros(fan_out))
    return arrays


@dataclass
class ParamVector:
    """Trainable state: PUNN weights, FD-learner weights, log relaxation time.

    Flattening order is theta layers, then omega layers, then ``log_tau``
    (present for the ARZ family only).
    """

    theta: list[np.ndarray]
    omega: list[np.ndarray]
    log_tau: float | None = None
    names: list[str] = field(init=False, repr=False)

    def __post_init__(self):
        self.theta = [np.asarray(a, dtype=np.float64) for a in self.theta]
        self.omega = [np.asarray(a, dtype=np.float64) for a in self.omega]
        self.names = _names(len(self.theta), len(self.omega), self.log_tau is not None)

    @property
    def tau(self) -> float | None:
        return None if self.log_tau is None else float(np.exp(self.log_tau))

    def arrays(self) -> list[np.ndarray]:
        out = list(self.theta) + list(self.omega)
        if self.log_tau is not None:
            out.append(np.asarray(self.log_tau, dtype=np.float64))
        return out

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.names, self.arrays()))

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    def __len__(self):
        return int(sum(np.size(a) for a in self.arrays()))

    def unflatten(self, flat) -> "ParamVector":
        """New ParamVector with this one's layout and values from ``flat``."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (len(self),):
            raise ConfigurationError(f"flat vector has length {flat.size}, expected {len(self)}")
        arrays, start = [], 0
        for a in self.arrays():
            n = np.size(a)
            arrays.append(flat[start:start + n].reshape(np.shape(a)).copy())
            start += n
        k, m = len(self.theta), len(self.omega)
        log_tau = float(arrays[-1]) if self.log_tau is not None else None
        return ParamVector(arrays[:k], arrays[k:k + m], log_tau)

    def copy(self) -> "ParamVector":
        return self.unflatten(self.flatten())


def _names(n_theta, n_omega, has_tau):
    names = [f"theta.{'W' if i % 2 == 0 else 'b'}{i // 2}" for i in range(n_theta)]
    names += [f"omega.{'W' if i % 2 == 0 else 'b'}{i // 2}" for i in range(n_omega)]
    if has_tau:
        names.append("log_tau")
    return names


def init_params(family: str, seed: int = 0, tau_init: float = 1.0,
                punn: MlpConfig | None = None, fdl: MlpConfig | None = None) -> ParamVector:
    """Fresh parameters for the LWR or ARZ preset (or custom shapes)."""
    family = _check_family(family)
    default_punn, default_fdl = PRESETS[family]
    punn = (punn or default_punn).with_seed(seed)
    # offset keeps the two generators from sharing a stream
    fdl = (fdl or default_fdl).with_seed(seed + 7919)
    if tau_init <= 0:
        raise ConfigurationError("tau_init must be positive")
    log_tau = float(np.log(tau_init)) if family == "arz" else None
    return ParamVector(init(punn), init(fdl), log_tau)


def _check_family(family):
    family = str(family).lower()
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown physics family {family!r}")
    return family


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def mlp(inputs: ad.Expr, layers: list[ad.Expr]) -> ad.Expr:
    """tanh MLP with a linear output layer; ``layers = [W0, b0, W1, b1, ...]``."""
    h = inputs
    n = len(layers) // 2
    for i in range(n):
        h = h @ layers[2 * i] + layers[2 * i + 1]
        if i < n - 1:
            h = ad.tanh(h)
    return h


class NetworkGraph:
    """Graph variables for a ParamVector plus builders for PUNN / FDL outputs."""

    def __init__(self, params: ParamVector, fd_output: str = "speed"):
        if fd_output not in FD_OUTPUTS:
            raise ConfigurationError(f"fd_output must be one of {FD_OUTPUTS}")
        self.fd_output = fd_output
        self.variables = [ad.Variable(name, value) for name, value in params.as_dict().items()]
        k, m = len(params.theta), len(params.omega)
        self.theta = self.variables[:k]
        self.omega = self.variables[k:k + m]
        self.log_tau = self.variables[k + m] if params.log_tau is not None else None
        self.has_tau = params.log_tau is not None

    def bind(self, params: ParamVector):
        for var, value in zip(self.variables, params.arrays()):
            var.bind(value)

    def bindings(self, params: ParamVector) -> dict[str, np.ndarray]:
        return params.as_dict()

    def punn(self, X: ad.Expr) -> ad.Expr:
        return mlp(X, self.theta)

    def fdl(self, rho: ad.Expr) -> ad.Expr:
        return mlp(rho, self.omega)

    def speed_from_density(self, rho: ad.Expr) -> ad.Expr:
        out = self.fdl(rho)
        if self.fd_output == "flow":
            return out / rho
        return out

    def tau(self) -> ad.Expr:
        return ad.exp(self.log_tau)

    def fields(self, family: str):
        """Callable ``X -> (rho_hat, u_hat)`` for the given family."""
        family = _check_family(family)
        if family == "lwr":
            def lwr_fields(X):
                rho = self.punn(X)
                return rho, self.speed_from_density(rho)
            return lwr_fields

        def arz_fields(X):
            out = self.punn(X)
            return out[:, 0:1], out[:, 1:2]
        return arz_fields


class PredictionPair(NamedTuple):
    rho_hat: np.ndarray
    u_hat: np.ndarray


def _inputs(x, t):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)).reshape(-1)
    if x.shape != t.shape:
        raise ConfigurationError("x and t must have the same length")
    return ad.Constant(np.column_stack([x, t]))


def forward_lwr(params: ParamVector, x, t, fd_output: str = "speed") -> PredictionPair:
    graph = NetworkGraph(params, fd_output)
    if graph.theta[-2].shape[1] != 1:
        raise ConfigurationError("parameters are not an LWR preset (PUNN output must be 1)")
    rho, u = graph.fields("lwr")(_inputs(x, t))
    return PredictionPair(rho.value[:, 0].copy(), u.value[:, 0].copy())


def forward_arz(params: ParamVector, x, t) -> PredictionPair:
    graph = NetworkGraph(params)
    if graph.theta[-2].shape[1] != 2:
        raise ConfigurationError("parameters are not an ARZ preset (PUNN output must be 2)")
    rho, u = graph.fields("arz")(_inputs(x, t))
    return PredictionPair(rho.value[:, 0].copy(), u.value[:, 0].copy())


def equilibrium_speed(params: ParamVector, rho) -> np.ndarray:
    """FD-learner output evaluated on normalized densities."""
    graph = NetworkGraph(params)
    r = ad.Constant(np.asarray(rho, dtype=np.float64).reshape(-1, 1))
    return graph.fdl(r).value[:, 0].copy()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, params: ParamVector, meta: dict | None = None) -> Path:
    """Raw little-endian float64 values plus a ``key = value`` sidecar header.

    Returns the header path (``<path>.header.txt``).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params.flatten().astype("<f8").tofile(path)
    header = dict(meta or {})
    header["n_values"] = len(params)
    header["theta_shapes"] = ";".join("x".join(map(str, np.shape(a))) for a in params.theta)
    header["omega_shapes"] = ";".join("x".join(map(str, np.shape(a))) for a in params.omega)
    header["has_tau"] = int(params.log_tau is not None)
    header_path = path.with_name(path.name + ".header.txt")
    lines = [f"{key} = {value}" for key, value in header.items()]
    header_path.write_text("\n".join(lines) + "\n")
    return header_path


def _parse_shapes(text):
    shapes = []
    for part in text.split(";"):
        part = part.strip()
        if part:
            shapes.append(tuple(int(n) for n in part.split("x")))
    return shapes


def load_checkpoint(path) -> tuple[ParamVector, dict[str, str]]:
    path = Path(path)
    header_path = path.with_name(path.name + ".header.txt")
    meta = {}
    for line in header_path.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    flat = np.fromfile(path, dtype="<f8")
    if flat.size != int(meta["n_values"]):
        raise ConfigurationError(f"checkpoint holds {flat.size} values, header says {meta['n_values']}")
    theta = [np.zeros(s) for s in _parse_shapes(meta["theta_shapes"])]
    omega = [np.zeros(s) for s in _parse_shapes(meta["omega_shapes"])]
    template = ParamVector(theta, omega, 0.0 if meta.get("has_tau") == "1" else None)
    return template.unflatten(flat), meta

"""Command-line front end.

Exit codes: 0 success, 1 unexpected internal error, 2 configuration or input
error (message names the offending ``section.key`` or file), 3 a training run
diverged.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import bounds as bd
from . import datahub as dh
from . import diagnostics as dg
from . import trainer as tr
from .exceptions import ConfigurationError, DivergenceError, TrafficPIMLError
from .networks import save_checkpoint
from .physics import PhysicsSpec

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "physics": {
        "family": (str, "lwr"),
        "u_max": (float, 30.0),
        "rho_max": (float, 0.15),
        "pressure": (str, "linear"),
        "pressure_c": (float, 1.0),
        "pressure_gamma": (float, 1.0),
        "tau_mode": (str, "trainable"),
        "tau": (float, 1.0),
    },
    "simulate": {
        "ic": (str, "sine"),
        "road_length": (float, 680.0),
        "sim_length": (float, 2040.0),
        "x_offset": (float, 680.0),
        "horizon": (float, 90.0),
        "nx": (int, 1020),
        "dt": (float, 0.05),
        "boundary": (str, "periodic"),
        "ic_mean": (float, 0.35),
        "ic_amp": (float, 0.05),
        "rho_left": (float, 0.8),
        "rho_right": (float, 0.2),
        "n_sensors": (int, 14),
        "report_dt": (float, 1.5),
        "noise": (float, 0.0),
    },
    "data": {
        "detectors": (str, ""),
        "collocation": (_bool, True),
    },
    "train": {
        "alpha": (float, 100.0),
        "beta": (float, 100.0),
        "betas": (_floats, list(tr.BETA_SWEEP)),
        "epochs": (int, 5000),
        "learning_rate": (float, 1e-3),
        "optimizer": (str, "adam"),
        "repeats": (int, 3),
        "test_fraction": (float, 0.2),
        "residual_units": (str, "physical"),
        "fd_output": (str, "speed"),
        "tau_init": (float, 1.0),
    },
    "diagnostics": {
        "failure_threshold": (float, tr.FAILURE_THRESHOLD),
        "delta": (float, 0.5),
        "resolution": (int, 41),
        "probe_every": (int, 10),
        "adam_probes": (_bool, False),
        "power_tol": (float, 1e-6),
        "power_max_iter": (int, 1000),
    },
    "bound": {
        "kind": (str, "separable_sine"),
        "a": (float, 0.5),
        "b": (float, 0.1),
        "k_x": (float, float(np.pi)),
        "k_t": (float, float(np.pi)),
        "u_amp": (float, 2.0),
        "delta_x": (float, 0.1),
        "delta_t": (float, 0.05),
        "resolution": (int, bd.DEFAULT_RESOLUTION),
        "refine": (_bool, True),
    },
}


class Config(dict):
    """``{section: {key: value}}`` after schema validation."""

    def snapshot(self):
        return {s: dict(sorted(v.items())) for s, v in sorted(self.items())}


def load_config(path=None) -> Config:
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigurationError(f"config file unreadable: {exc}") from None
    cfg = Config()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigurationError(f"unknown config key {section}.{key}")
    for section, keys in SCHEMA.items():
        cfg[section] = {}
        for key, (kind, default) in keys.items():
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    cfg[section][key] = kind(raw)
                except (TypeError, ValueError):
                    raise ConfigurationError(f"invalid value for {section}.{key}: {raw!r}") from None
            else:
                cfg[section][key] = default
    return cfg


def _field_guard(section, key, fn):
    try:
        return fn()
    except ConfigurationError as exc:
        raise ConfigurationError(f"{section}.{key}: {exc}") from None


def physics_spec(cfg) -> PhysicsSpec:
    p = cfg["physics"]
    try:
        return PhysicsSpec(p["family"], p["u_max"], p["rho_max"], p["pressure"], p["pressure_c"],
                           p["pressure_gamma"], "greenshields", p["tau_mode"], p["tau"])
    except ConfigurationError as exc:
        raise ConfigurationError(f"physics: {exc}") from None


def train_config(cfg, seed) -> tr.TrainConfig:
    t = cfg["train"]
    try:
        return tr.TrainConfig(t["learning_rate"], t["epochs"], t["optimizer"], seed, t["repeats"],
                              t["test_fraction"], t["fd_output"], t["tau_init"], t["residual_units"])
    except ConfigurationError as exc:
        raise ConfigurationError(f"train: {exc}") from None


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """One artifact directory, its outputs and its manifest."""

    def __init__(self, command, args, cfg):
        self.command = command
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.seed = args.seed
        self.inputs = {}
        self.outputs = []
        if args.config:
            self.add_input(args.config)

    def add_input(self, path):
        self.inputs[str(path)] = _sha256(path)

    def path(self, name) -> Path:
        p = self.out / name
        rel = str(p.relative_to(self.out))
        if rel not in self.outputs:
            self.outputs.append(rel)
        return p

    def write_json(self, name, payload):
        self.path(name).write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")

    def finish(self, extra=None):
        manifest = {
            "command": self.command,
            "config": self.cfg.snapshot(),
            "seeds": {"base": self.seed},
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": sorted(self.outputs),
            "version": __version__,
        }
        if extra:
            manifest.update(extra)
        (self.out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------


def simulate_field(cfg, spec):
    s = cfg["simulate"]
    if s["nx"] < 2 or s["horizon"] <= 0 or s["dt"] <= 0:
        raise ConfigurationError("simulate: nx >= 2, horizon > 0 and dt > 0 required")
    dx = s["sim_length"] / s["nx"]
    nt = int(round(s["horizon"] / s["dt"]))
    grid = dh.GodunovGrid(s["nx"], nt, dx, s["dt"])
    rho_max = spec.rho_max
    if s["ic"] == "sine":
        ic = lambda x: rho_max * (s["ic_mean"] + s["ic_amp"] * np.sin(2 * np.pi * x / s["sim_length"]))  # noqa: E731
    elif s["ic"] == "constant":
        ic = lambda x: np.full_like(x, rho_max * s["ic_mean"])  # noqa: E731
    elif s["ic"] == "riemann":
        mid = s["x_offset"] + s["road_length"] / 2
        ic = lambda x: np.where(x < mid, rho_max * s["rho_left"], rho_max * s["rho_right"])  # noqa: E731
    else:
        raise ConfigurationError(f"simulate.ic: unknown initial condition {s['ic']!r}")
    return _field_guard("simulate", "dt", lambda: dh.solve_lwr_godunov(ic, spec, grid, s["boundary"]))


def sample_field(cfg, fld, seed=0):
    s = cfg["simulate"]
    geometry = _field_guard("simulate", "n_sensors", lambda: dh.SamplingGeometry.from_sensor_count(
        s["road_length"], s["n_sensors"], s["report_dt"]))
    # sensors start half a cell in so the first one sits on a cell centre
    start = s["x_offset"] + fld.dx / 2
    ds = _field_guard("simulate", "report_dt",
                      lambda: dh.sparse_sample(fld, geometry, x_start=start, length=s["road_length"]))
    ds = _field_guard("simulate", "noise", lambda: dh.add_detector_noise(ds, s["noise"], seed))
    return ds.with_collocation(dh.uniform_collocation(ds))


def load_dataset(run, cfg, args, spec):
    path = getattr(args, "data", None) or cfg["data"]["detectors"]
    if not path:
        raise ConfigurationError("no detector data: pass --data or set data.detectors")
    if not Path(path).is_file():
        raise ConfigurationError(f"detector file not found: {path}")
    run.add_input(path)
    ds = dh.load_detector_csv(path, imperial=args.imperial, spec=spec)
    if cfg["data"]["collocation"]:
        ds = ds.with_collocation(dh.uniform_collocation(ds))
    return ds


def _weights(cfg, beta=None, alpha=None):
    t = cfg["train"]
    return tr.LossWeights.with_beta(t["beta"] if beta is None else beta, t["alpha"] if alpha is None else alpha)


def _check_divergence(result: tr.TrainResult, label):
    if any(result.diverged):
        epoch = next(h.diverged_epoch for h in result.history if h.diverged)
        raise DivergenceError(epoch, float("nan"))


def _write_losses(run, name, result: tr.TrainResult):
    arrays = result.losses
    rows = np.column_stack([np.arange(arrays["total"].size), arrays["total"], arrays["data"], arrays["physics"]])
    with run.path(name).open("w") as fh:
        fh.write("epoch,total,data,physics\n")
        for r in rows:
            fh.write(f"{int(r[0])},{r[1]!r},{r[2]!r},{r[3]!r}\n")


def _sweep(ds, spec, config, betas, alpha, jobs):
    return tr.sweep_beta(ds, spec, config, betas, alpha, jobs)


def _write_sweep(run, sweep: tr.SweepResult, name="sweep.csv"):
    with run.path(name).open("w") as fh:
        fh.write(",".join(tr.SWEEP_COLUMNS) + "\n")
        for row in sweep.rows():
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args, cfg):
    run = Run("simulate", args, cfg)
    spec = physics_spec(cfg)
    fld = simulate_field(cfg, spec)
    ds = sample_field(cfg, fld, args.seed)
    dh.write_matrix_csv(fld.rho, fld.t_grid, fld.x_grid, run.path("rho.csv"))
    dh.write_matrix_csv(fld.u, fld.t_grid, fld.x_grid, run.path("u.csv"))
    dh.write_detector_csv(ds, run.path("detectors.csv"))
    dh.write_points_csv(ds.collocation, run.path("collocation.csv"))
    run.write_json("geometry.json", {"delta_x_m": ds.geometry.delta_x, "delta_t_s": ds.geometry.delta_t,
                                     "n_obs": ds.n_obs, "n_coll": ds.n_coll,
                                     "cfl_upper_dt_s": bd.cfl_max_dt(ds.geometry.delta_x, spec.u_max)})
    run.finish()
    return EXIT_OK


def cmd_train(args, cfg):
    run = Run("train", args, cfg)
    spec = physics_spec(cfg)
    ds = load_dataset(run, cfg, args, spec)
    config = train_config(cfg, args.seed)
    result = tr.train(ds, spec, _weights(cfg), config)
    _check_divergence(result, "train")
    save_checkpoint(run.path("params.bin"), result.params,
                    {"preset": spec.family, "seed": args.seed, **ds.normalization.as_dict()})
    run.path("params.bin.header.txt")
    _write_losses(run, "losses.csv", result)
    run.write_json("train.json", {"beta": cfg["train"]["beta"], **result.summary(),
                                  "err_rho": result.err_rho, "err_u": result.err_u})
    run.finish()
    return EXIT_OK


def cmd_sweep(args, cfg):
    run = Run("sweep", args, cfg)
    spec = physics_spec(cfg)
    ds = load_dataset(run, cfg, args, spec)
    config = train_config(cfg, args.seed)
    sweep = _sweep(ds, spec, config, cfg["train"]["betas"], cfg["train"]["alpha"], args.jobs)
    _write_sweep(run, sweep)
    run.write_json("sweep.json", {"best_beta": sweep.best_beta, "table": sweep.table})
    run.finish()
    return EXIT_OK


def _trained_loss(ds, spec, config, beta, alpha):
    weights = tr.LossWeights.with_beta(beta, alpha)
    result = tr.train(ds, spec, weights, config)
    train_set, _ = tr.split_dataset(ds, config.test_fraction)
    loss = tr.build_loss(result.params, train_set, spec, weights, config)
    return result, loss


def _landscape(cfg, loss, params, seed):
    d = cfg["diagnostics"]
    top = dg.hessian_top2(dg.loss_hvp(loss, params), len(params), seed, d["power_tol"], d["power_max_iter"])
    fn = dg.loss_function(loss, params)
    grid = dg.landscape_grid(fn, params.flatten(), top.v1, top.v2, d["delta"], d["resolution"],
                             top.lambda1, top.lambda2)
    return top, grid


def cmd_landscape(args, cfg):
    run = Run("landscape", args, cfg)
    spec = physics_spec(cfg)
    ds = load_dataset(run, cfg, args, spec)
    config = replace_repeats(train_config(cfg, args.seed))
    result, loss = _trained_loss(ds, spec, config, cfg["train"]["beta"], cfg["train"]["alpha"])
    _check_divergence(result, "landscape")
    top, grid = _landscape(cfg, loss, result.params, args.seed)
    dg.write_landscape_csv(grid, run.path("landscape.csv"))
    run.write_json("landscape.json", {"lambda1": top.lambda1, "lambda2": top.lambda2,
                                      "converged": top.converged, "iterations": list(top.iterations),
                                      "center": grid.center, "center_gap": grid.center_gap})
    run.finish()
    return EXIT_OK


def replace_repeats(config, repeats=1):
    from dataclasses import replace

    return replace(config, repeats=repeats)


def cmd_graddiag(args, cfg):
    run = Run("graddiag", args, cfg)
    spec = physics_spec(cfg)
    ds = load_dataset(run, cfg, args, spec)
    config = train_config(cfg, args.seed)
    d = cfg["diagnostics"]
    res = dg.run_graddiag(ds, spec, _weights(cfg), config, d["probe_every"], d["adam_probes"])
    if res.history.diverged:
        raise DivergenceError(res.history.diverged_epoch, float("nan"))
    dg.write_dominance_csv(res.log, run.path("dominance.csv"))
    run.write_json("graddiag.json", {"dominance_ratio": res.ratio, "probes": len(res.log)})
    run.finish()
    return EXIT_OK


def cmd_cfl_audit(args, cfg):
    run = Run("cfl-audit", args, cfg)
    spec = physics_spec(cfg)
    ds = load_dataset(run, cfg, args, spec)
    report = bd.cfl_audit(ds, spec)
    report.to_csv(run.path("cfl.csv"))
    run.write_json("cfl.json", {"all_pass": report.all_pass, "worst_ratio": report.worst_ratio(),
                                "rows": [r._asdict() for r in report.rows]})
    run.finish()
    return EXIT_OK


def bound_report(cfg, spec):
    b = cfg["bound"]
    if b["kind"] == "separable_sine":
        params = dict(a=b["a"] * spec.rho_max, b=b["b"] * spec.rho_max, k_x=b["k_x"], k_t=b["k_t"], u_amp=b["u_amp"])
    elif b["kind"] == "constant":
        params = dict(rho0=b["a"] * spec.rho_max)
    else:
        raise ConfigurationError(f"bound.kind: unsupported manufactured kind {b['kind']!r}")
    fld = _field_guard("bound", "kind", lambda: dh.manufactured_solution(b["kind"], spec, **params))
    bundle = bd.DerivativeBundle.from_field(fld)
    lwr = bd.lwr_bound(bundle, b["delta_x"], b["delta_t"], b["resolution"], b["refine"])
    arz = bd.arz_bound(bundle, b["delta_x"], b["delta_t"], b["resolution"], b["refine"])
    verdict = bd.compare_bounds(lwr, arz)
    payload = arz.as_dict()
    payload["lwr"] = lwr.as_dict()
    payload["ordering"] = verdict._asdict()
    payload["field"] = {"kind": b["kind"], **params}
    return payload


def cmd_bound(args, cfg):
    run = Run("bound", args, cfg)
    spec = physics_spec(cfg)
    run.write_json("bound.json", bound_report(cfg, spec))
    run.finish()
    return EXIT_OK


def _pure_runs(ds, spec, config, alpha):
    data_only = tr.train(ds, spec, tr.LossWeights(alpha, alpha, 0.0, 0.0), config)
    beta = max(1.0, alpha)
    phys_only = tr.train(ds, spec, tr.LossWeights(0.0, 0.0, beta, beta), config)
    return data_only, phys_only


def cmd_diagnose(args, cfg):
    run = Run("diagnose", args, cfg)
    spec = physics_spec(cfg)
    ds = load_dataset(run, cfg, args, spec)
    config = train_config(cfg, args.seed)
    t, d = cfg["train"], cfg["diagnostics"]

    sweep = _sweep(ds, spec, config, t["betas"], t["alpha"], args.jobs)
    _write_sweep(run, sweep)
    best = sweep.results[sweep.best_beta]
    _check_divergence(best, "sweep")

    data_only, phys_only = _pure_runs(ds, spec, config, t["alpha"])
    e_piml = (best.err_rho_mean, best.err_u_mean)
    e_ml = (data_only.err_rho_mean, data_only.err_u_mean)
    e_pm = (phys_only.err_rho_mean, phys_only.err_u_mean)
    verdict = tr.failure_test(e_piml, e_ml, e_pm, d["failure_threshold"])

    grad = dg.run_graddiag(ds, spec, sweep.best_weights, replace_repeats(config), d["probe_every"], d["adam_probes"])
    dg.write_dominance_csv(grad.log, run.path("dominance.csv"))

    train_set, _ = tr.split_dataset(ds, config.test_fraction)
    loss = tr.build_loss(best.params, train_set, spec, sweep.best_weights, config)
    top, grid = _landscape(cfg, loss, best.params, args.seed)
    dg.write_landscape_csv(grid, run.path(f"landscape_beta{sweep.best_beta:g}.csv"))

    cfl = bd.cfl_audit(ds, spec)
    cfl.to_csv(run.path("cfl.csv"))
    bound = bound_report(cfg, spec)
    run.write_json("bound.json", bound)

    summary = {
        "sweep": sweep.table,
        "best_beta": sweep.best_beta,
        "errors": {"piml": e_piml, "pure_data": e_ml, "pure_physics": e_pm},
        "pure_physics_degraded": bool(e_pm[0] > e_ml[0] and e_pm[1] > e_ml[1]),
        "failure_test": {"improvement_rho_pct": verdict.percent_rho, "improvement_u_pct": verdict.percent_u,
                         "verdict": verdict.verdict, "threshold": d["failure_threshold"]},
        "dominance_ratio": grad.ratio,
        "landscape": {"lambda1": top.lambda1, "lambda2": top.lambda2, "converged": top.converged,
                      "center_gap": grid.center_gap},
        "cfl": {"all_pass": cfl.all_pass, "worst_ratio": cfl.worst_ratio()},
        "bound_ordering_holds": bound["ordering"]["holds"],
    }
    run.write_json("summary.json", summary)
    run.finish()
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "landscape": cmd_landscape,
    "graddiag": cmd_graddiag,
    "cfl-audit": cmd_cfl_audit,
    "bound": cmd_bound,
}


def _global_flags(parser, suppress=False):
    # subcommand copies must not reset values given before the subcommand
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None),
                        help="INI file with [physics] [simulate] [data] [train] [diagnostics] [bound]")
    parser.add_argument("--seed", type=int, default=d(0), help="base seed for every random draw")
    parser.add_argument("--out", default=d("out"), help="artifact directory")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker processes for independent runs")
    parser.add_argument("--imperial", action="store_true", default=d(False),
                        help="detector CSV speeds in mph, densities in veh/mile")


def build_parser():
    parser = argparse.ArgumentParser(prog="trafficpiml", description=__doc__.splitlines()[0])
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _global_flags(p, suppress=True)
        if name not in ("simulate", "bound"):
            p.add_argument("--data", help="detector CSV (overrides data.detectors)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except TrafficPIMLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

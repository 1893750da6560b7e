"""Batch front-end: config parsing, orchestration, and result files.

Subcommands: ``simulate`` runs the configured scenario and writes trajectory
and MSD curves plus a diagnostics report; ``sweep`` runs the step-size
scaling study; ``verify`` executes the acceptance suite.  All outputs are
deterministic for a fixed resolved config (the manifest's wall time is the
single exception), and the thread count never affects results.

Exit codes: 0 success, 1 check failure, 2 config error, 3 runtime
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._rng import MOMENT_STREAM, make_rng
from .acceptance import run_all
from .analysis import disagreement_moments
from .costs import NoiseModel, estimate_noise_moments
from .diffusion import DiffusionConfig, NonFiniteIterate, export_trajectory_csv, initial_state, run
from .experiments import (ScenarioSpec, member_seed, mu_sweep,
                          robust_regression_scenario, run_ensemble_msd)
from .network import burn_in_horizon

THREADS_ENV = "DIFFUSION_LAB_THREADS"


class ConfigError(ValueError):
    """Aggregated validation failures, each tagged with its field path."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_SCENARIO_DEFAULTS = {
    "name": "nominal",
    "n_agents": 20,
    "dim": 5,
    "topology_seed": 7,
    "weight_rule": "metropolis",
    "noise": {"kind": "gaussian", "sigma_v2": 0.1,
              "epsilon": 0.0, "outlier_mean": 0.0},
    "losses": ["mse"],
    "strategies": ["diffusion"],
    "mu": 0.005,
    "iterations": 5000,
    "ensemble": 200,
    "regressor_powers": None,
    "w_true": None,
    "init_dispersion": 0.0,
    "huber_tuning": None,
    "tukey_tuning": None,
}

_DEFAULTS = {
    "scenario": _SCENARIO_DEFAULTS,
    "seed": 2024,
    "record_perturbations": True,
    "thresholds": {"pi": 0.5, "tau_factor": 0.1, "horizon": 1.0},
    "sweep": {"mus": [0.01, 0.005], "window": 300},
}


def _merge(defaults, given, path, errors):
    resolved = {}
    for key, default in defaults.items():
        if isinstance(default, dict) and key in given \
                and not isinstance(given.get(key), dict):
            errors.append(f"{path}{key}: expected an object")
            resolved[key] = default
            continue
        if isinstance(default, dict):
            resolved[key] = _merge(default, given.get(key, {}),
                                   f"{path}{key}.", errors)
        else:
            resolved[key] = given.get(key, default)
    for key in given:
        if key not in defaults:
            errors.append(f"{path}{key}: unknown field")
    return resolved


def _validate(resolved, errors):
    sc = resolved["scenario"]

    def check(cond, message):
        if not cond:
            errors.append(message)

    check(isinstance(sc["name"], str) and sc["name"], "scenario.name: must be a nonempty string")
    check(isinstance(sc["n_agents"], int) and sc["n_agents"] >= 1,
          "scenario.n_agents: must be a positive integer")
    check(isinstance(sc["dim"], int) and sc["dim"] >= 1,
          "scenario.dim: must be a positive integer")
    check(isinstance(sc["topology_seed"], int) and sc["topology_seed"] >= 0,
          "scenario.topology_seed: must be a nonnegative integer")
    check(sc["weight_rule"] in ("metropolis", "uniform-averaging"),
          "scenario.weight_rule: must be metropolis or uniform-averaging")
    noise = sc["noise"]
    check(noise["kind"] in ("gaussian", "bimodal"),
          "scenario.noise.kind: must be gaussian or bimodal")
    check(isinstance(noise["sigma_v2"], (int, float)) and noise["sigma_v2"] > 0,
          "scenario.noise.sigma_v2: must be positive")
    check(isinstance(noise["epsilon"], (int, float)) and 0 <= noise["epsilon"] <= 1,
          "scenario.noise.epsilon: must lie in [0, 1]")
    check(isinstance(sc["losses"], list) and sc["losses"]
          and all(k in ("mse", "huber", "tukey") for k in sc["losses"]),
          "scenario.losses: must be a nonempty list drawn from mse/huber/tukey")
    check(isinstance(sc["strategies"], list) and sc["strategies"]
          and all(s in ("diffusion", "non-cooperative") for s in sc["strategies"]),
          "scenario.strategies: must be a nonempty list drawn from "
          "diffusion/non-cooperative")
    check(isinstance(sc["mu"], (int, float)) and sc["mu"] > 0,
          "scenario.mu: must be positive")
    check(isinstance(sc["iterations"], int) and sc["iterations"] >= 1,
          "scenario.iterations: must be a positive integer")
    check(isinstance(sc["ensemble"], int) and sc["ensemble"] >= 1,
          "scenario.ensemble: must be a positive integer")
    if sc["regressor_powers"] is not None:
        check(isinstance(sc["regressor_powers"], list)
              and len(sc["regressor_powers"]) == sc["n_agents"]
              and all(isinstance(x, (int, float)) and x > 0
                      for x in sc["regressor_powers"]),
              "scenario.regressor_powers: must list one positive power per agent")
    if sc["w_true"] is not None:
        check(isinstance(sc["w_true"], list) and len(sc["w_true"]) == sc["dim"],
              "scenario.w_true: must have length scenario.dim")
    check(isinstance(sc["init_dispersion"], (int, float)) and sc["init_dispersion"] >= 0,
          "scenario.init_dispersion: must be nonnegative")
    for key in ("huber_tuning", "tukey_tuning"):
        if sc[key] is not None:
            check(isinstance(sc[key], (int, float)) and sc[key] > 0,
                  f"scenario.{key}: must be positive")

    check(isinstance(resolved["seed"], int) and 0 <= resolved["seed"] < 2**64,
          "seed: must be a 64-bit nonnegative integer")
    check(isinstance(resolved["record_perturbations"], bool),
          "record_perturbations: must be a boolean")
    th = resolved["thresholds"]
    check(isinstance(th["pi"], (int, float)) and 0 < th["pi"] < 1,
          "thresholds.pi: must lie strictly between 0 and 1")
    check(isinstance(th["tau_factor"], (int, float)) and th["tau_factor"] > 0,
          "thresholds.tau_factor: must be positive")
    check(isinstance(th["horizon"], (int, float)) and th["horizon"] > 0,
          "thresholds.horizon: must be positive")
    sw = resolved["sweep"]
    check(isinstance(sw["mus"], list) and len(sw["mus"]) >= 2
          and all(isinstance(x, (int, float)) and x > 0 for x in sw["mus"]),
          "sweep.mus: must list at least two positive step sizes")
    check(isinstance(sw["window"], int) and sw["window"] >= 10,
          "sweep.window: must be an integer of at least 10")


@dataclass(frozen=True)
class ParsedConfig:
    scenario: ScenarioSpec
    run: DiffusionConfig
    thresholds: dict
    sweep_mus: tuple
    sweep_window: int
    resolved: dict
    config_hash: str


def config_hash(resolved: dict) -> str:
    canonical = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def parse_config(path, seed_override=None) -> ParsedConfig:
    """Resolve the config at ``path`` against defaults.

    Validation failures are aggregated into one ``ConfigError`` rather than
    reported one at a time.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            given = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON in {path}: {exc}"]) from exc
    if not isinstance(given, dict):
        raise ConfigError(["config: top level must be an object"])
    return resolve_config(given, seed_override)


def resolve_config(given: dict, seed_override=None) -> ParsedConfig:
    errors = []
    resolved = _merge(_DEFAULTS, given, "", errors)
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    if not errors:
        _validate(resolved, errors)
    if errors:
        raise ConfigError(sorted(errors))

    sc = resolved["scenario"]
    noise = (NoiseModel.bimodal(sc["noise"]["epsilon"], sc["noise"]["outlier_mean"],
                                sc["noise"]["sigma_v2"])
             if sc["noise"]["kind"] == "bimodal"
             else NoiseModel.gaussian(sc["noise"]["sigma_v2"]))
    scenario = ScenarioSpec(
        name=sc["name"], n_agents=sc["n_agents"], dim=sc["dim"],
        topology_seed=sc["topology_seed"], weight_rule=sc["weight_rule"],
        noise=noise, losses_compared=tuple(sc["losses"]),
        strategies=tuple(sc["strategies"]), mu=float(sc["mu"]),
        iterations=sc["iterations"], ensemble=sc["ensemble"],
        regressor_powers=(tuple(sc["regressor_powers"])
                          if sc["regressor_powers"] is not None else None),
        w_true=tuple(sc["w_true"]) if sc["w_true"] is not None else None,
        init_dispersion=float(sc["init_dispersion"]),
        huber_tuning=sc["huber_tuning"], tukey_tuning=sc["tukey_tuning"],
    )
    run_cfg = DiffusionConfig(mu=scenario.mu, iterations=scenario.iterations,
                              record_perturbations=resolved["record_perturbations"],
                              seed=resolved["seed"])
    return ParsedConfig(scenario=scenario, run=run_cfg,
                        thresholds=dict(resolved["thresholds"]),
                        sweep_mus=tuple(float(m) for m in resolved["sweep"]["mus"]),
                        sweep_window=int(resolved["sweep"]["window"]),
                        resolved=resolved, config_hash=config_hash(resolved))


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------

def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_msd_csv(path: Path, curves) -> None:
    iterations = len(curves[0].msd_db)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration," + ",".join(c.label for c in curves) + "\n")
        columns = [c.msd_db for c in curves]
        for i in range(iterations):
            fh.write(str(i) + "," + ",".join(repr(float(col[i])) for col in columns) + "\n")


class _Outputs:
    """Collects written files so the manifest can list every one of them."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name) -> Path:
        self.files.append(name)
        return self.dir / name

    def manifest(self, cfg_hash, seed, started) -> None:
        payload = {
            "config_hash": cfg_hash,
            "seed": seed,
            "artifact_version": __version__,
            "outputs": sorted(self.files + ["run_manifest.json"]),
            "wall_time": time.time() - started,
        }
        _write_json(self.dir / "run_manifest.json", payload)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _simulate(cfg: ParsedConfig, out: _Outputs, threads: int) -> int:
    spec = cfg.scenario
    bundle = robust_regression_scenario(spec)
    i0 = burn_in_horizon(spec.mu, bundle.matrix.mixing_rate)
    curves = []
    steady = {}
    member0 = {}
    for strategy in spec.strategies:
        matrix = bundle.matrix if strategy == "diffusion" else None
        for kind in spec.losses_compared:
            label = f"{strategy}:{kind}"
            oracles = bundle.oracles[kind]
            ens = run_ensemble_msd(oracles, matrix, spec.mu, spec.iterations,
                                   bundle.w_true, spec.ensemble,
                                   base_seed=cfg.run.seed, threads=threads,
                                   label=label,
                                   init_dispersion=spec.init_dispersion)
            curves.append(ens.curve())
            mean, se, _ = ens.steady_state(i0)
            steady[label] = {"mean_db": 10.0 * math.log10(max(mean, 1e-300)),
                             "se_linear": se}
            record = cfg.run.record_perturbations and kind == "mse"
            seed0 = member_seed(cfg.run.seed, 0)
            run_cfg = DiffusionConfig(mu=spec.mu, iterations=spec.iterations,
                                      record_perturbations=record, seed=seed0)
            init = initial_state(spec.n_agents, np.zeros(spec.dim),
                                 spec.init_dispersion, seed=seed0)
            traj = run(init, oracles, matrix, run_cfg)
            member0[label] = traj
            export_trajectory_csv(
                traj, out.path(f"trajectory_{spec.name}_{strategy}_{kind}.csv"))
    _write_msd_csv(out.path(f"msd_{spec.name}.csv"), curves)
    _write_json(out.path(f"diagnostics_{spec.name}.json"),
                _diagnostics(cfg, bundle, i0, steady, member0))
    return 0


def _diagnostics(cfg: ParsedConfig, bundle, i0, steady, member0) -> dict:
    spec = cfg.scenario
    p = bundle.matrix.perron
    report = {
        "config_hash": cfg.config_hash,
        "scenario": spec.name,
        "mixing_rate": bundle.matrix.mixing_rate,
        "burn_in": int(i0),
        "msd_steady_state": steady,
        "thresholds": None,
        "disagreement": {},
        "perturbations": {},
    }
    for label, traj in member0.items():
        if traj.n_steps + 1 > i0:
            mom = disagreement_moments(traj, p, i0)
            report["disagreement"][label] = {
                "second": mom.second, "fourth": mom.fourth,
                "per_agent_second": [float(x) for x in mom.per_agent_second],
            }
        if traj.has_records:
            d_sq = (traj.d_perturbations**2).sum(axis=1)
            s_sq = (traj.s_perturbations**2).sum(axis=1)
            report["perturbations"][label] = {
                "d_second": float(d_sq[i0:].mean()) if len(d_sq) > i0 else None,
                "s_second": float(s_sq[i0:].mean()) if len(s_sq) > i0 else None,
                "s_fourth": float((s_sq[i0:] ** 2).mean()) if len(s_sq) > i0 else None,
            }
    if all(kind == "mse" for kind in spec.losses_compared):
        # Closed-form aggregate curvature: thresholds are cheap to estimate.
        oracles = bundle.oracles["mse"]
        hessian = sum(pk * o.true_hessian(bundle.w_true)
                      for pk, o in zip(p, oracles))
        delta = float(np.abs(np.linalg.eigvalsh(hessian)).max())
        sigma2 = max(
            estimate_noise_moments(o, bundle.w_true, 4000,
                                   make_rng(cfg.run.seed, MOMENT_STREAM, k)
                                   ).second_moment
            for k, o in enumerate(oracles))
        th = cfg.thresholds
        c1 = 0.5 * (1.0 - 2.0 * spec.mu * delta)
        report["thresholds"] = {
            "delta": delta, "rho": 0.0, "sigma2": sigma2,
            "mu": spec.mu, "pi": th["pi"], "tau": th["tau_factor"] * delta,
            "c1": c1, "c2": 0.5 * delta * sigma2,
            "gradient_threshold": (spec.mu * (0.5 * delta * sigma2 / c1)
                                   * (1.0 + 1.0 / th["pi"])) if c1 > 0 else None,
        }
    return report


def _sweep(cfg: ParsedConfig, out: _Outputs, threads: int) -> int:
    spec = cfg.scenario
    bundle = robust_regression_scenario(spec)
    kind = spec.losses_compared[0]
    report = mu_sweep(bundle.oracles[kind], bundle.matrix, cfg.sweep_mus,
                      ensemble=spec.ensemble, base_seed=cfg.run.seed,
                      window=cfg.sweep_window, threads=threads,
                      w0=bundle.w_true)
    _write_json(out.path(f"scaling_{spec.name}.json"), report)
    return 0


def _verify(out: _Outputs, threads: int, criteria=None) -> int:
    results = run_all(criteria=criteria, threads=threads, echo=True)
    payload = [{"index": r.index, "name": r.name, "passed": r.passed,
                "runtime_s": r.runtime_s, "budget_s": r.budget_s,
                "detail": r.detail} for r in results]
    _write_json(out.path("verify_report.json"), payload)
    failed = [r.index for r in results if not r.passed]
    if failed:
        print(f"FAILED criteria: {failed}")
        return 1
    print(f"all {len(results)} criteria passed")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def run_command(subcommand, config_path, out_dir, seed=None, threads=None,
                criteria=None) -> int:
    """Execute one subcommand; returns the process exit status."""
    started = time.time()
    threads = _resolve_threads(threads)
    out = _Outputs(out_dir)
    try:
        if subcommand == "verify":
            if config_path is not None:
                cfg = parse_config(config_path, seed_override=seed)
            else:
                cfg = resolve_config({}, seed_override=seed)
            status = _verify(out, threads, criteria)
        else:
            if config_path is None:
                raise ConfigError([f"config: {subcommand} requires --config"])
            cfg = parse_config(config_path, seed_override=seed)
            _write_json(out.path("resolved_config.json"), cfg.resolved)
            if subcommand == "simulate":
                status = _simulate(cfg, out, threads)
            elif subcommand == "sweep":
                status = _sweep(cfg, out, threads)
            else:
                raise ValueError(f"unknown subcommand {subcommand!r}")
    except ConfigError as exc:
        json.dump({"error": "ConfigError", "errors": exc.errors}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except NonFiniteIterate as exc:
        json.dump({"error": "NonFiniteIterate", "iteration": exc.iteration},
                  sys.stderr)
        sys.stderr.write("\n")
        return 3
    out.manifest(cfg.config_hash, cfg.resolved["seed"], started)
    return status


def _resolve_threads(threads) -> int:
    if threads is not None:
        return max(int(threads), 1)
    env = os.environ.get(THREADS_ENV)
    return max(int(env), 1) if env else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="diffusion-lab",
        description="Adapt-then-combine diffusion simulator and diagnostics")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, needs_config in (("simulate", True), ("sweep", True),
                               ("verify", False)):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=needs_config, default=None,
                        help="JSON experiment config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (fallback: ${THREADS_ENV}); "
                             "never affects results")
        if name == "verify":
            sp.add_argument("--criteria", default=None,
                            help="comma-separated criterion indices (default all)")
    args = parser.parse_args(argv)
    criteria = None
    if getattr(args, "criteria", None):
        criteria = [int(tok) for tok in args.criteria.split(",") if tok]
    return run_command(args.subcommand, args.config, args.out, seed=args.seed,
                       threads=args.threads, criteria=criteria)


if __name__ == "__main__":
    sys.exit(main())

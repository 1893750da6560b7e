"""Acceptance checks: one callable per criterion, shared by the CLI
``verify`` subcommand and the test suite.

Each criterion pins its own scenario, seeds and tolerances and returns a
``CriterionResult``; nothing here depends on user configuration, so a
passing suite means the same thing on every machine.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from ._rng import MOMENT_STREAM, make_rng
from .analysis import (Regime, RegimeThresholds, aggregate_gradient,
                       aggregate_hessian, classify_point, descent_statistics,
                       estimate_lipschitz_constants, find_anchor,
                       limit_constant, limit_constant_limit, short_term_run)
from .costs import (CostOracle, LinearDataModel, NoiseModel, QuadraticOracle,
                    estimate_noise_moments, make_loss, make_regressor_cov)
from .diffusion import DiffusionConfig, initial_state, run
from .experiments import (ScenarioSpec, member_seed, mu_sweep,
                          robust_regression_scenario, run_ensemble_msd,
                          saddle_quadratic_oracles)
from .network import (Topology, build_combination_matrix, burn_in_horizon,
                      perron_vector, random_geometric_topology)


@dataclass(frozen=True)
class CriterionResult:
    index: int
    name: str
    passed: bool
    runtime_s: float
    budget_s: float
    detail: str
    metrics: dict = field(default_factory=dict)

    @property
    def within_budget(self) -> bool:
        return self.runtime_s < self.budget_s

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"criterion {self.index:2d} [{status}] {self.name}: "
                f"{self.detail} ({self.runtime_s:.1f}s / budget {self.budget_s:.0f}s)")


def _result(index, name, budget, started, passed, detail, metrics=None):
    return CriterionResult(index=index, name=name, passed=bool(passed),
                           runtime_s=time.perf_counter() - started,
                           budget_s=budget, detail=detail,
                           metrics=metrics or {})


def _in(value, bounds) -> bool:
    return bounds[0] <= value <= bounds[1]


# -- 1: spectral correctness -------------------------------------------------

def criterion_spectral() -> CriterionResult:
    t0 = time.perf_counter()
    worst_gap = worst_residual = 0.0
    for i in range(25):
        n = 2 + (i % 19)
        topo = random_geometric_topology(n, seed=1000 + i)
        rule = "metropolis" if i % 2 == 0 else "uniform-averaging"
        cm = build_combination_matrix(topo, rule)
        # dense eigensolver oracle
        vals, vecs = np.linalg.eig(cm.weights)
        lead = np.argmin(np.abs(vals - 1.0))
        p_oracle = np.real(vecs[:, lead])
        p_oracle = p_oracle / p_oracle.sum()
        worst_gap = max(worst_gap, float(np.abs(cm.perron - p_oracle).max()))
        worst_residual = max(worst_residual,
                             float(np.abs(cm.weights @ cm.perron - cm.perron).max()))
    passed = worst_gap <= 1e-8 and worst_residual <= 1e-10
    return _result(1, "spectral correctness", 5.0, t0, passed,
                   f"max |p - oracle| = {worst_gap:.2e} (<=1e-8), "
                   f"max |Ap - p| = {worst_residual:.2e} (<=1e-10)",
                   {"perron_gap": worst_gap, "residual": worst_residual})


# -- 2: centroid consensus invariance ----------------------------------------

def criterion_consensus_invariance() -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(10):
        n = 3 + (i % 10)
        topo = random_geometric_topology(n, seed=2000 + i)
        cm = build_combination_matrix(topo, "metropolis" if i % 2 else "uniform-averaging")
        oracles = [QuadraticOracle(np.eye(3), noise_std=0.7) for _ in range(n)]
        cfg = DiffusionConfig(mu=0.0, iterations=1000, seed=300 + i)
        init = initial_state(n, np.zeros(3), dispersion=1.0, seed=300 + i)
        traj = run(init, oracles, cm, cfg)
        drift = np.abs(traj.centroids - traj.centroids[0]).max()
        worst = max(worst, float(drift))
    passed = worst <= 1e-12
    return _result(2, "centroid consensus invariance", 10.0, t0, passed,
                   f"max centroid drift over 10 graphs x 1000 iters = {worst:.2e} (<=1e-12)",
                   {"drift": worst})


# -- 3/4: shared scaling sweep -------------------------------------------------

SWEEP_SPEC = ScenarioSpec(name="scaling", n_agents=8, dim=5, topology_seed=37,
                          losses_compared=("mse",), mu=0.01, iterations=700,
                          ensemble=200)
SWEEP_MUS = (0.01, 0.005)
SWEEP_SEED = 11


@lru_cache(maxsize=2)
def scaling_sweep(threads=1) -> dict:
    bundle = robust_regression_scenario(SWEEP_SPEC)
    return mu_sweep(bundle.oracles["mse"], bundle.matrix, SWEEP_MUS,
                    ensemble=SWEEP_SPEC.ensemble, base_seed=SWEEP_SEED,
                    window=300, threads=threads, w0=bundle.w_true)


def criterion_disagreement_scaling(threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    report = scaling_sweep(threads)
    ratio = report["ratios"][0]
    passed = ratio["second_in_range"] and ratio["fourth_in_range"]
    return _result(3, "disagreement scaling", 300.0, t0, passed,
                   f"second ratio {ratio['second_ratio']:.2f} in [2.6, 5.4], "
                   f"fourth ratio {ratio['fourth_ratio']:.2f} in [9, 25]",
                   {"second_ratio": ratio["second_ratio"],
                    "fourth_ratio": ratio["fourth_ratio"]})


def criterion_perturbation_bounds(threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    report = scaling_sweep(threads)
    ratio = report["ratios"][0]
    bundle = robust_regression_scenario(SWEEP_SPEC)
    sigma4 = sigma4_se = 0.0
    for k, oracle in enumerate(bundle.oracles["mse"]):
        est = estimate_noise_moments(oracle, bundle.w_true, 20_000,
                                     make_rng(SWEEP_SEED, MOMENT_STREAM, k))
        if est.fourth_moment > sigma4:
            sigma4, sigma4_se = est.fourth_moment, est.fourth_se
    s_ok = all(m["s_fourth"] <= sigma4
               + 3.0 * math.hypot(sigma4_se, m["s_fourth_se"])
               for m in report["moments"])
    passed = ratio["d_second_in_range"] and s_ok
    worst_s = max(m["s_fourth"] for m in report["moments"])
    return _result(4, "perturbation bounds", 300.0, t0, passed,
                   f"d-second ratio {ratio['d_second_ratio']:.2f} in [2.6, 5.4], "
                   f"max E||s||^4 {worst_s:.3e} <= sigma4 {sigma4:.3e} + 3 SE",
                   {"d_second_ratio": ratio["d_second_ratio"],
                    "s_fourth": worst_s, "sigma4": sigma4})


# -- 5/6: one-step descent and ascent ------------------------------------------

def _descent_setup():
    oracle = QuadraticOracle(np.diag([1.0, 0.5]), noise_std=0.5)
    mu = 0.01
    box = (np.full(2, -3.0), np.full(2, 3.0))
    lip = estimate_lipschitz_constants([oracle], [1.0], box, n_pairs=500, seed=5)
    moments = estimate_noise_moments(oracle, np.array([2.0, 0.0]), 100_000,
                                     make_rng(5, MOMENT_STREAM))
    thresholds = RegimeThresholds(delta=lip.delta, rho=lip.rho,
                                  sigma2=moments.second_moment, mu=mu, pi=0.5)
    return oracle, thresholds


def _one_step_ensemble(oracle, mu, w0, ensemble, base_seed):
    trajectories = []
    for m in range(ensemble):
        cfg = DiffusionConfig(mu=mu, iterations=1, record_perturbations=True,
                              seed=member_seed(base_seed, m))
        trajectories.append(run(initial_state(1, w0), [oracle], None, cfg))
    return trajectories


def criterion_descent_in_g() -> CriterionResult:
    t0 = time.perf_counter()
    oracle, th = _descent_setup()
    grad, hess = oracle.true_gradient, oracle.true_hessian
    w0 = np.array([2.0, 0.0])
    anchored = classify_point(w0, th, grad, hess) is Regime.G
    stats = descent_statistics(_one_step_ensemble(oracle, th.mu, w0, 500, 77),
                               th, grad, hess, sets=(Regime.G,))
    g = stats.decrease[Regime.G]
    bound = th.mu**2 * th.c2 / th.pi
    passed = anchored and g.mean > 3 * g.se and g.mean >= bound - 3 * g.se
    return _result(5, "descent in the large-gradient regime", 120.0, t0, passed,
                   f"mean one-step decrease {g.mean:.3e} (se {g.se:.1e}) "
                   f">= mu^2 c2/pi = {bound:.3e} - 3 SE, positive at 3 SE",
                   {"decrease": g.mean, "se": g.se, "bound": bound})


def criterion_ascent_in_m() -> CriterionResult:
    t0 = time.perf_counter()
    oracle, th = _descent_setup()
    grad, hess = oracle.true_gradient, oracle.true_hessian
    w0 = np.zeros(2)
    anchored = classify_point(w0, th, grad, hess) is Regime.M
    stats = descent_statistics(_one_step_ensemble(oracle, th.mu, w0, 500, 78),
                               th, grad, hess, sets=(Regime.M,))
    m = stats.decrease[Regime.M]
    increase = -m.mean
    bound = th.mu**2 * th.c2
    passed = anchored and increase <= bound + 3 * m.se
    return _result(6, "ascent bound at second-order stationary points", 120.0,
                   t0, passed,
                   f"mean one-step increase {increase:.3e} (se {m.se:.1e}) "
                   f"<= mu^2 c2 = {bound:.3e} + 3 SE",
                   {"increase": increase, "se": m.se, "bound": bound})


# -- 7: short-term model fidelity ----------------------------------------------

def _ring_matrix(n):
    edges = [(k, (k + 1) % n) for k in range(n)]
    return build_combination_matrix(Topology.create(n, edges, True), "metropolis")


def criterion_short_term_model() -> CriterionResult:
    t0 = time.perf_counter()
    # (a) exactness: common quadratic risk, so the frozen-Hessian model and
    # the true centroid recursion coincide.
    cm3 = _ring_matrix(3)
    common = [QuadraticOracle(np.diag([1.0, 0.5]), noise_std=0.3) for _ in range(3)]
    th = RegimeThresholds(delta=1.0, rho=0.0, sigma2=2 * 0.09, mu=0.01, pi=0.5,
                          tau=0.05)
    cfg = DiffusionConfig(mu=0.01, iterations=130, record_perturbations=True,
                          seed=901)
    traj = run(initial_state(3, np.array([0.5, -0.5])), common, cm3, cfg)
    p = cm3.perron
    grad = lambda w: aggregate_gradient(common, p, w)
    hess = lambda w: aggregate_hessian(common, p, w)
    exact = short_term_run(traj, 20, 1.0, th, grad, hess)
    exact_gap = float(np.sqrt(exact.gap_sq.max()))

    # (b) step-halving ratios at a saddle anchor.
    cm4 = _ring_matrix(4)
    oracles = saddle_quadratic_oracles(4, 0.5, 0.05, linear_heterogeneity=0.2)
    p4 = cm4.perron
    grad4 = lambda w: aggregate_gradient(oracles, p4, w)
    hess4 = lambda w: aggregate_hessian(oracles, p4, w)
    horizon_T, ensemble = 1.0, 300
    means = {}
    excluded_total = 0
    for mu in (0.01, 0.005):
        th_mu = RegimeThresholds(delta=1.5, rho=0.0, sigma2=2 * 0.05**2, mu=mu,
                                 pi=0.5, tau=0.15)
        i0 = burn_in_horizon(mu, cm4.mixing_rate)
        steps = int(horizon_T / mu)
        gap_acc = np.zeros(steps + 1)
        true_acc = np.zeros(steps + 1)
        kept = 0
        for m in range(ensemble):
            seed = member_seed(123, m)
            cfg = DiffusionConfig(mu=mu, iterations=i0 + steps + 1,
                                  record_perturbations=True, seed=seed)
            traj = run(initial_state(4, np.zeros(2)), oracles, cm4, cfg)
            anchor = find_anchor(traj, th_mu, grad4, hess4, target=Regime.H,
                                 start=i0)
            if anchor is None or anchor + steps > traj.n_steps:
                excluded_total += 1
                continue
            st = short_term_run(traj, anchor, horizon_T, th_mu, grad4, hess4)
            gap_acc += st.gap_sq
            true_acc += st.true_sq
            kept += 1
        means[mu] = (gap_acc[1:].mean() / kept, true_acc[1:].mean() / kept)
    gap_ratio = means[0.01][0] / means[0.005][0]
    true_ratio = means[0.01][1] / means[0.005][1]
    passed = (exact_gap <= 1e-10 and _in(gap_ratio, (2.4, 6.0))
              and _in(true_ratio, (1.3, 3.0)))
    return _result(7, "short-term model fidelity", 300.0, t0, passed,
                   f"exact-case max gap {exact_gap:.2e} (<=1e-10); "
                   f"gap ratio {gap_ratio:.2f} in [2.4, 6], "
                   f"deviation ratio {true_ratio:.2f} in [1.3, 3] "
                   f"({excluded_total} runs excluded)",
                   {"exact_gap": exact_gap, "gap_ratio": gap_ratio,
                    "true_ratio": true_ratio, "excluded": excluded_total})


# -- 8: step-size amplification constant ----------------------------------------

def criterion_limit_constant() -> CriterionResult:
    t0 = time.perf_counter()
    cases = [(1, 1.0, 1.0), (2, 0.5, 2.0), (3, 1.0, 0.5)]
    worst_rel = 0.0
    monotone = True
    for k, horizon, delta in cases:
        limit = limit_constant_limit(k, horizon, delta)
        rel = abs(limit_constant(k, horizon, delta, 1e-4) - limit) / limit
        worst_rel = max(worst_rel, rel)
        errors = [abs(limit_constant(k, horizon, delta, mu) - limit)
                  for mu in (1e-2, 1e-3, 1e-4)]
        monotone &= errors[0] > errors[1] > errors[2]
    passed = worst_rel <= 0.01 and monotone
    return _result(8, "amplification constant", 1.0, t0, passed,
                   f"max relative error at mu=1e-4: {worst_rel:.2e} (<=1e-2), "
                   f"strictly decreasing in mu: {monotone}",
                   {"worst_rel": worst_rel, "monotone": monotone})


# -- 9: gradient and Hessian oracles --------------------------------------------

def criterion_derivative_oracles() -> CriterionResult:
    t0 = time.perf_counter()
    dim = 5
    model = LinearDataModel(dim, np.full(dim, 0.5 / math.sqrt(dim)),
                            make_regressor_cov(1.2, dim, 3),
                            NoiseModel.gaussian(0.1))
    rng = np.random.default_rng(9)
    sigma_v = math.sqrt(0.1)
    worst = {}
    for kind in ("mse", "huber", "tukey"):
        oracle = CostOracle(make_loss(kind, sigma_v=sigma_v), model)
        wg = wh = 0.0
        for _ in range(10):
            w = model.w_true + rng.normal(size=dim)
            fd_g = _fd_gradient(oracle, w)
            g = oracle.true_gradient(w)
            wg = max(wg, np.linalg.norm(g - fd_g) / np.linalg.norm(fd_g))
            fd_h = _fd_hessian(oracle, w)
            h = oracle.true_hessian(w)
            wh = max(wh, np.linalg.norm(h - fd_h) / np.linalg.norm(fd_h))
        worst[kind] = (wg, wh)
    passed = all(wg <= 1e-4 and wh <= 1e-3 for wg, wh in worst.values())
    detail = ", ".join(f"{k}: grad {wg:.1e} hess {wh:.1e}"
                       for k, (wg, wh) in worst.items())
    return _result(9, "derivative oracles vs finite differences", 60.0, t0,
                   passed, detail + " (grad<=1e-4, hess<=1e-3)",
                   {k: {"grad": wg, "hess": wh} for k, (wg, wh) in worst.items()})


def _fd_gradient(oracle, w, h=1e-6):
    g = np.zeros_like(w)
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = h
        g[j] = (oracle.risk(w + e) - oracle.risk(w - e)) / (2 * h)
    return g


def _fd_hessian(oracle, w, h=1e-5):
    H = np.zeros((len(w), len(w)))
    for j in range(len(w)):
        e = np.zeros_like(w)
        e[j] = h
        H[:, j] = (oracle.true_gradient(w + e) - oracle.true_gradient(w - e)) / (2 * h)
    return 0.5 * (H + H.T)


# -- 10: qualitative robust-regression reproduction ------------------------------

FIGURE_MU = 0.01
FIGURE_ITERATIONS = 2500
FIGURE_ENSEMBLE = 200
FIGURE_SEED = 101


def criterion_figure_reproduction(threads=1) -> CriterionResult:
    t0 = time.perf_counter()
    nominal = ScenarioSpec(name="nominal", n_agents=20, dim=5, topology_seed=7,
                           losses_compared=("mse",), mu=FIGURE_MU,
                           iterations=FIGURE_ITERATIONS, ensemble=FIGURE_ENSEMBLE)
    bundle = robust_regression_scenario(nominal)
    i0 = burn_in_horizon(FIGURE_MU, bundle.matrix.mixing_rate)
    args = dict(mu=FIGURE_MU, iterations=FIGURE_ITERATIONS,
                ensemble=FIGURE_ENSEMBLE, base_seed=FIGURE_SEED, threads=threads)
    diffusion = run_ensemble_msd(bundle.oracles["mse"], bundle.matrix,
                                 w_true=bundle.w_true, **args).steady_state(i0)
    noncoop = run_ensemble_msd(bundle.oracles["mse"], None,
                               w_true=bundle.w_true, **args).steady_state(i0)
    coop_ok = diffusion[0] + 3 * diffusion[1] < noncoop[0] - 3 * noncoop[1]

    corrupted = replace(nominal, name="corrupted",
                        noise=NoiseModel.bimodal(0.1, 10.0, 0.1),
                        losses_compared=("mse", "huber", "tukey"))
    bundle_c = robust_regression_scenario(corrupted)
    steady_db = {}
    for kind in ("mse", "huber", "tukey"):
        mean, _, _ = run_ensemble_msd(bundle_c.oracles[kind], bundle_c.matrix,
                                      w_true=bundle_c.w_true, **args).steady_state(i0)
        steady_db[kind] = 10.0 * math.log10(mean)
    huber_gain = steady_db["mse"] - steady_db["huber"]
    tukey_gain = steady_db["mse"] - steady_db["tukey"]
    robust_ok = huber_gain >= 3.0 and tukey_gain >= 3.0
    passed = coop_ok and robust_ok
    to_db = lambda x: 10.0 * math.log10(x)
    return _result(10, "robust-regression comparison", 600.0, t0, passed,
                   f"nominal: diffusion {to_db(diffusion[0]):.1f} dB < "
                   f"non-cooperative {to_db(noncoop[0]):.1f} dB at 3 SE; "
                   f"corrupted: huber gain {huber_gain:.1f} dB, "
                   f"tukey gain {tukey_gain:.1f} dB (>=3 dB)",
                   {"diffusion_db": to_db(diffusion[0]),
                    "noncoop_db": to_db(noncoop[0]),
                    "huber_gain_db": huber_gain, "tukey_gain_db": tukey_gain})


# -- 11: thread-count determinism -------------------------------------------------

def criterion_thread_determinism() -> CriterionResult:
    t0 = time.perf_counter()
    single = json.dumps(scaling_sweep(1), sort_keys=True)
    threaded = json.dumps(scaling_sweep(8), sort_keys=True)
    passed = single == threaded
    return _result(11, "thread-count determinism", 300.0, t0, passed,
                   f"scaling report bytes identical for 1 vs 8 threads: {passed}",
                   {"identical": passed})


# ---------------------------------------------------------------------------

CRITERIA = {
    1: criterion_spectral,
    2: criterion_consensus_invariance,
    3: criterion_disagreement_scaling,
    4: criterion_perturbation_bounds,
    5: criterion_descent_in_g,
    6: criterion_ascent_in_m,
    7: criterion_short_term_model,
    8: criterion_limit_constant,
    9: criterion_derivative_oracles,
    10: criterion_figure_reproduction,
    11: criterion_thread_determinism,
}

_THREADED = {3, 4, 10}


def run_all(criteria=None, threads=1, echo=True):
    """Run the requested criteria (all by default) and return their results."""
    indices = sorted(criteria) if criteria else sorted(CRITERIA)
    results = []
    for index in indices:
        fn = CRITERIA[index]
        result = fn(threads) if index in _THREADED else fn()
        results.append(result)
        if echo:
            print(result.line(), flush=True)
    return results

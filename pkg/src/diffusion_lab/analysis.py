"""Diagnostics over simulated trajectories.

Quantifies the objects the simulator is instrumented for: disagreement
moments with their burn-in, perturbation moments, the large-gradient /
strict-saddle / second-order-stationary classification of centroids,
conditional one-step descent statistics, the frozen-Hessian short-term
model and its deviation from the true recursion, and empirical Lipschitz
constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ._rng import BOX_STREAM, make_rng
from .diffusion import Trajectory


class InsufficientSamples(ValueError):
    """Not enough post-burn-in iterations to average over."""


class EmptyConditioningSet(RuntimeError):
    """No ensemble sample landed in the requested regime."""


class MissingNoiseRecord(RuntimeError):
    """The trajectory does not carry the recorded noise realizations."""


class StepTooLarge(ValueError):
    """The step size violates ``mu * delta < 1``."""


# ---------------------------------------------------------------------------
# aggregate risk helpers
# ---------------------------------------------------------------------------

def aggregate_risk(oracles, p, w) -> float:
    return float(sum(pk * o.risk(w) for pk, o in zip(p, oracles)))


def aggregate_gradient(oracles, p, w) -> np.ndarray:
    g = np.zeros(len(np.asarray(w)))
    for pk, o in zip(p, oracles):
        g += pk * o.true_gradient(w)
    return g


def aggregate_hessian(oracles, p, w) -> np.ndarray:
    m = len(np.asarray(w))
    H = np.zeros((m, m))
    for pk, o in zip(p, oracles):
        H += pk * o.true_hessian(w)
    return H


# ---------------------------------------------------------------------------
# disagreement moments
# ---------------------------------------------------------------------------

def stacked_deviation_sq(trajectory: Trajectory, p) -> np.ndarray:
    """Squared norm of the stacked deviation from the centroid, per iteration."""
    p = np.asarray(p, dtype=float)
    centroids = np.einsum("k,ikj->ij", p, trajectory.iterates)
    dev = trajectory.iterates - centroids[:, None, :]
    return (dev * dev).sum(axis=(1, 2))


@dataclass(frozen=True)
class DisagreementMoments:
    """Time-averaged moments of the stacked centroid deviation."""

    second: float
    fourth: float
    per_agent_second: np.ndarray
    burn_in: int
    sample_count: int
    second_se: float = 0.0
    fourth_se: float = 0.0


def disagreement_moments(trajectory: Trajectory, p, i0) -> DisagreementMoments:
    """Average the squared/quartic stacked deviation over iterations >= ``i0``."""
    i0 = int(i0)
    if trajectory.n_steps + 1 <= i0:
        raise InsufficientSamples(
            f"trajectory has {trajectory.n_steps + 1} states, burn-in is {i0}")
    p = np.asarray(p, dtype=float)
    centroids = np.einsum("k,ikj->ij", p, trajectory.iterates[i0:])
    dev = trajectory.iterates[i0:] - centroids[:, None, :]
    per_agent = (dev * dev).sum(axis=2)        # (window, n_agents)
    sq = per_agent.sum(axis=1)
    fourth = sq * sq
    n = len(sq)
    return DisagreementMoments(
        second=float(sq.mean()),
        fourth=float(fourth.mean()),
        per_agent_second=per_agent.mean(axis=0),
        burn_in=i0,
        sample_count=n,
        second_se=float(sq.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        fourth_se=float(fourth.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
    )


# ---------------------------------------------------------------------------
# regime classification
# ---------------------------------------------------------------------------

class Regime(Enum):
    G = "G"   # large gradient
    H = "H"   # approximately stationary with a significant negative curvature
    M = "M"   # approximately second-order stationary


@dataclass(frozen=True)
class RegimeThresholds:
    """Constants behind the regime classification.

    ``c1 = (1 - 2 mu delta) / 2`` must be positive, which bounds the step
    size by ``1 / (2 delta)``; ``c2 = delta sigma2 / 2``.
    """

    delta: float
    rho: float
    sigma2: float
    mu: float
    pi: float = 0.5
    tau: float | None = None

    def __post_init__(self):
        if self.delta < 0 or self.rho < 0 or self.sigma2 < 0:
            raise ValueError("constants must be nonnegative")
        if self.mu <= 0:
            raise ValueError("step size must be positive")
        if not 0 < self.pi < 1:
            raise ValueError("pi must lie strictly between 0 and 1")
        if self.tau is None:
            object.__setattr__(self, "tau", 0.1 * self.delta)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.c1 <= 0:
            raise ValueError("mu must be below 1 / (2 delta) so that c1 > 0")

    @property
    def c1(self) -> float:
        return 0.5 * (1.0 - 2.0 * self.mu * self.delta)

    @property
    def c2(self) -> float:
        return 0.5 * self.delta * self.sigma2

    @property
    def gradient_threshold(self) -> float:
        """Squared-gradient-norm boundary of the large-gradient regime."""
        return self.mu * (self.c2 / self.c1) * (1.0 + 1.0 / self.pi)


def classify_point(w, thresholds, gradient_fn, hessian_fn) -> Regime:
    """Large gradient, strict saddle, or second-order stationary."""
    g = np.asarray(gradient_fn(w), dtype=float)
    if g @ g >= thresholds.gradient_threshold:
        return Regime.G
    lam_min = float(np.linalg.eigvalsh(np.asarray(hessian_fn(w)))[0])
    if lam_min <= -thresholds.tau:
        return Regime.H
    return Regime.M


# ---------------------------------------------------------------------------
# conditional descent statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SetStatistic:
    mean: float
    se: float
    count: int


@dataclass(frozen=True)
class DescentStatistics:
    """Conditional one-step cost changes and regime frequencies.

    ``decrease[regime]`` estimates the expected drop of the aggregate cost
    between consecutive iterations, conditioned on the centroid's regime at
    the earlier iteration.  ``counts[i]`` holds the (G, H, M) occupation
    counts at iteration ``i`` across the ensemble; each row sums to the
    ensemble size exactly.
    """

    decrease: dict
    counts: np.ndarray
    ensemble: int

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.ensemble


def descent_statistics(trajectories, thresholds, gradient_fn, hessian_fn,
                       sets=(Regime.G, Regime.M)) -> DescentStatistics:
    """Pool one-step cost changes over an ensemble, conditioned by regime.

    Every trajectory must carry recorded costs.  Raises
    ``EmptyConditioningSet`` when one of the requested ``sets`` captured no
    sample.
    """
    trajectories = list(trajectories)
    if len(trajectories) == 0:
        raise ValueError("empty ensemble")
    steps = trajectories[0].n_steps
    order = [Regime.G, Regime.H, Regime.M]
    counts = np.zeros((steps, 3), dtype=int)
    drops = {regime: [] for regime in order}
    for traj in trajectories:
        if traj.costs is None:
            raise ValueError("descent statistics need recorded costs")
        if traj.n_steps != steps:
            raise ValueError("all trajectories must have equal length")
        for i in range(steps):
            regime = classify_point(traj.centroids[i], thresholds,
                                    gradient_fn, hessian_fn)
            counts[i, order.index(regime)] += 1
            drops[regime].append(traj.costs[i] - traj.costs[i + 1])
    decrease = {}
    for regime in sets:
        values = np.array(drops[regime])
        if len(values) == 0:
            raise EmptyConditioningSet(f"no sample landed in {regime.value}")
        se = values.std(ddof=1) / math.sqrt(len(values)) if len(values) > 1 else 0.0
        decrease[regime] = SetStatistic(float(values.mean()), float(se), len(values))
    return DescentStatistics(decrease=decrease, counts=counts,
                             ensemble=len(trajectories))


# ---------------------------------------------------------------------------
# short-term model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShortTermState:
    """True and frozen-Hessian deviations from the anchor at one step."""

    anchor: np.ndarray
    anchor_gradient: np.ndarray
    anchor_hessian: np.ndarray
    aux_iterate: np.ndarray
    true_deviation: np.ndarray
    aux_deviation: np.ndarray


@dataclass(frozen=True)
class ShortTermRun:
    """Short-term auxiliary recursion next to the recorded true run.

    The auxiliary recursion freezes the aggregate Hessian at the anchor,
    drops the disagreement perturbation and consumes the same recorded
    noise realizations as the true run.  Deviations are measured from the
    anchor centroid and are zero at step zero by construction.
    """

    anchor_index: int
    anchor: np.ndarray
    anchor_gradient: np.ndarray
    anchor_hessian: np.ndarray
    true_deviation: np.ndarray   # (horizon + 1, dim)
    aux_deviation: np.ndarray    # (horizon + 1, dim)

    @property
    def horizon_steps(self) -> int:
        return self.true_deviation.shape[0] - 1

    @property
    def true_sq(self) -> np.ndarray:
        return (self.true_deviation**2).sum(axis=1)

    @property
    def true_cube(self) -> np.ndarray:
        return self.true_sq**1.5

    @property
    def true_fourth(self) -> np.ndarray:
        return self.true_sq**2

    @property
    def gap_sq(self) -> np.ndarray:
        gap = self.true_deviation - self.aux_deviation
        return (gap * gap).sum(axis=1)

    @property
    def aux_sq(self) -> np.ndarray:
        return (self.aux_deviation**2).sum(axis=1)

    def step(self, i) -> ShortTermState:
        return ShortTermState(
            anchor=self.anchor,
            anchor_gradient=self.anchor_gradient,
            anchor_hessian=self.anchor_hessian,
            aux_iterate=self.anchor - self.aux_deviation[i],
            true_deviation=self.true_deviation[i].copy(),
            aux_deviation=self.aux_deviation[i].copy(),
        )


def short_term_run(trajectory: Trajectory, anchor_index, horizon,
                   thresholds, gradient_fn, hessian_fn) -> ShortTermRun:
    """Advance the frozen-Hessian model for ``floor(horizon / mu)`` steps.

    Requires the recorded noise realizations of the true run past the
    anchor; raises ``MissingNoiseRecord`` when they are absent or the
    trajectory is too short.
    """
    mu = thresholds.mu
    steps = int(math.floor(horizon / mu))
    i_star = int(anchor_index)
    if not trajectory.has_records:
        raise MissingNoiseRecord("run was executed without perturbation recording")
    if i_star + steps > trajectory.n_steps:
        raise MissingNoiseRecord(
            f"horizon needs {steps} recorded steps past {i_star}, trajectory "
            f"has {trajectory.n_steps - i_star}")
    anchor = trajectory.centroids[i_star].copy()
    g_a = np.asarray(gradient_fn(anchor), dtype=float)
    H_a = np.asarray(hessian_fn(anchor), dtype=float)
    dim = anchor.shape[0]
    prop = np.eye(dim) - mu * H_a

    true_dev = anchor[None, :] - trajectory.centroids[i_star:i_star + steps + 1]
    aux_dev = np.empty((steps + 1, dim))
    aux_dev[0] = 0.0
    x = aux_dev[0]
    for i in range(steps):
        x = prop @ x + mu * g_a + mu * trajectory.s_perturbations[i_star + i]
        aux_dev[i + 1] = x
    return ShortTermRun(anchor_index=i_star, anchor=anchor, anchor_gradient=g_a,
                        anchor_hessian=H_a, true_deviation=np.array(true_dev),
                        aux_deviation=aux_dev)


def find_anchor(trajectory: Trajectory, thresholds, gradient_fn, hessian_fn,
                target=Regime.H, start=0):
    """First iteration at or after ``start`` whose centroid is in ``target``,
    or ``None`` when no such iteration exists."""
    for i in range(int(start), trajectory.n_steps + 1):
        regime = classify_point(trajectory.centroids[i], thresholds,
                                gradient_fn, hessian_fn)
        if regime is target:
            return i
    return None


# ---------------------------------------------------------------------------
# step-size amplification constant
# ---------------------------------------------------------------------------

def limit_constant(k, horizon, delta, mu) -> float:
    """Evaluate ``((1 + mu d)^k / (1 - mu d)^(k-1))^(horizon / mu)``.

    This is the amplification factor picked up by k-th moment recursions
    over a horizon of ``horizon / mu`` steps; it stays bounded as the step
    size shrinks.
    """
    if k < 1 or int(k) != k:
        raise ValueError("k must be a positive integer")
    if horizon < 0 or delta <= 0:
        raise ValueError("horizon must be nonnegative and delta positive")
    if mu <= 0:
        raise ValueError("step size must be positive")
    if mu * delta >= 1.0:
        raise StepTooLarge(f"mu * delta = {mu * delta} >= 1")
    exponent = (horizon / mu) * (k * math.log1p(mu * delta)
                                 - (k - 1) * math.log1p(-mu * delta))
    return math.exp(exponent)


def limit_constant_limit(k, horizon, delta) -> float:
    """Small-step limit of ``limit_constant``: ``exp((2k - 1) horizon delta)``."""
    return math.exp((2 * k - 1) * horizon * delta)


# ---------------------------------------------------------------------------
# Lipschitz constant estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LipschitzEstimate:
    """Sampled gradient/Hessian smoothness constants of the aggregate risk.

    ``hessian_envelope_margin`` is the largest excess of a sampled Hessian
    eigenvalue magnitude over ``delta``; nonpositive means the eigenvalue
    envelope held at every sampled point.
    """

    delta: float
    rho: float
    hessian_envelope_margin: float


def estimate_lipschitz_constants(oracles, p, box, n_pairs=1000, seed=0,
                                 hessian_samples=None) -> LipschitzEstimate:
    """Estimate gradient and Hessian Lipschitz constants on a sample box.

    ``box`` is a ``(low, high)`` pair of coordinate bounds.  The gradient
    constant is the larger of the sampled difference quotients and the
    sampled Hessian spectral norms (exact for quadratic risks, where the
    Hessian is constant); the Hessian constant uses difference quotients
    alone.
    """
    low, high = (np.asarray(b, dtype=float) for b in box)
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    if hessian_samples is None:
        hessian_samples = min(int(n_pairs), 64)
    rng = make_rng(seed, BOX_STREAM)
    dim = len(low)

    delta = 0.0
    rho = 0.0
    for _ in range(int(n_pairs)):
        x = low + (high - low) * rng.random(dim)
        y = low + (high - low) * rng.random(dim)
        gap = np.linalg.norm(x - y)
        if gap < 1e-12:
            continue
        g_gap = np.linalg.norm(aggregate_gradient(oracles, p, x)
                               - aggregate_gradient(oracles, p, y))
        delta = max(delta, g_gap / gap)
    hess_norm_max = 0.0
    points = [low + (high - low) * rng.random(dim)
              for _ in range(int(hessian_samples))]
    hessians = [aggregate_hessian(oracles, p, x) for x in points]
    for i in range(len(points)):
        hess_norm_max = max(hess_norm_max,
                            float(np.abs(np.linalg.eigvalsh(hessians[i])).max()))
        for j in range(i + 1, min(i + 3, len(points))):
            gap = np.linalg.norm(points[i] - points[j])
            if gap < 1e-12:
                continue
            h_gap = np.linalg.norm(hessians[i] - hessians[j], ord=2)
            rho = max(rho, h_gap / gap)
    delta = max(delta, hess_norm_max)
    return LipschitzEstimate(delta=float(delta), rho=float(rho),
                             hessian_envelope_margin=float(hess_norm_max - delta))

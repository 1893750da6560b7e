"""Adapt-then-combine diffusion engine.

Each step every agent takes a stochastic gradient step on its own risk and
then convexly averages its neighbors' intermediate iterates through the
combination matrix.  The engine optionally records, per step, the realized
decomposition of the weighted-centroid update into the exact aggregate
gradient, the network-disagreement perturbation and the gradient-noise
perturbation, all from the same stochastic gradient realizations used in
the update.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._rng import AGENT_STREAM, INIT_STREAM, make_rng
from .costs import CostOracle, QuadraticOracle


class NonFiniteIterate(RuntimeError):
    """An iterate left the finite range; the step size is likely too large."""

    def __init__(self, iteration):
        super().__init__(f"non-finite iterate at iteration {iteration}")
        self.iteration = iteration


@dataclass(frozen=True)
class NetworkState:
    """Stacked iterates of all agents at one iteration."""

    iterates: np.ndarray  # (n_agents, dim), row k is agent k's iterate
    iteration: int

    def __post_init__(self):
        if not np.isfinite(self.iterates).all():
            raise NonFiniteIterate(self.iteration)
        self.iterates.setflags(write=False)

    @property
    def n_agents(self) -> int:
        return self.iterates.shape[0]

    @property
    def dim(self) -> int:
        return self.iterates.shape[1]


@dataclass(frozen=True)
class StepRecord:
    """Realized perturbation decomposition of one centroid update.

    Satisfies the reconstruction identity
    ``centroid == previous centroid - mu * (centroid_gradient +
    d_perturbation + s_perturbation)`` up to roundoff.
    """

    centroid: np.ndarray
    d_perturbation: np.ndarray
    s_perturbation: np.ndarray
    centroid_gradient: np.ndarray
    aggregate_cost: float


@dataclass(frozen=True)
class DiffusionConfig:
    """Run parameters.  ``mu == 0`` degenerates to pure neighborhood
    averaging and is allowed for consensus checks."""

    mu: float
    iterations: int
    record_perturbations: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mu < 0:
            raise ValueError("step size must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class Trajectory:
    """Dense record of one diffusion run.

    ``iterates[i]`` is the stacked state after ``i`` steps; ``centroids[i]``
    the weighted centroid.  The perturbation arrays are present only when
    the run recorded them: row ``i`` belongs to the step from iteration
    ``i`` to ``i + 1``.
    """

    mu: float
    perron: np.ndarray
    iterates: np.ndarray              # (steps + 1, n_agents, dim)
    centroids: np.ndarray             # (steps + 1, dim)
    costs: np.ndarray | None = None   # (steps + 1,)
    d_perturbations: np.ndarray | None = None   # (steps, dim)
    s_perturbations: np.ndarray | None = None   # (steps, dim)
    centroid_gradients: np.ndarray | None = None  # (steps, dim)

    @property
    def n_steps(self) -> int:
        return self.iterates.shape[0] - 1

    @property
    def has_records(self) -> bool:
        return self.d_perturbations is not None

    def state(self, i) -> NetworkState:
        return NetworkState(self.iterates[i].copy(), i)

    def record(self, i) -> StepRecord:
        """Record of the step that produced iteration ``i >= 1``."""
        if not self.has_records:
            raise ValueError("run was executed without perturbation recording")
        if not 1 <= i <= self.n_steps:
            raise IndexError(f"no step record for iteration {i}")
        return StepRecord(
            centroid=self.centroids[i].copy(),
            d_perturbation=self.d_perturbations[i - 1].copy(),
            s_perturbation=self.s_perturbations[i - 1].copy(),
            centroid_gradient=self.centroid_gradients[i - 1].copy(),
            aggregate_cost=float(self.costs[i]),
        )


def centroid(state, p) -> np.ndarray:
    """Weighted centroid of the stacked iterates under agent weights ``p``."""
    W = state.iterates if isinstance(state, NetworkState) else np.asarray(state)
    return np.asarray(p, dtype=float) @ W


def initial_state(n_agents, w0, dispersion=0.0, seed=0) -> NetworkState:
    """All agents at ``w0``, optionally perturbed by Gaussian dispersion."""
    w0 = np.asarray(w0, dtype=float)
    W = np.tile(w0, (n_agents, 1))
    if dispersion > 0:
        W = W + dispersion * make_rng(seed, INIT_STREAM).standard_normal(W.shape)
    return NetworkState(W, 0)


# ---------------------------------------------------------------------------
# prepared evaluation paths
# ---------------------------------------------------------------------------

class _GradientPlan:
    """Vectorized per-family evaluation for a fixed oracle list.

    The stochastic path draws from each agent's own stream with exactly the
    same call pattern as ``oracle.stochastic_gradient``, so vectorized and
    per-agent execution produce bit-identical trajectories.
    """

    def __init__(self, oracles, force_generic=False):
        self.oracles = list(oracles)
        self.n = len(self.oracles)
        self.dim = self.oracles[0].dim
        if any(o.dim != self.dim for o in self.oracles):
            raise ValueError("all oracles must share one parameter dimension")
        self.family = "generic"
        if not force_generic:
            if all(isinstance(o, QuadraticOracle) for o in self.oracles):
                self.family = "quadratic"
                self._quad = np.stack([o.quad for o in self.oracles])
                self._lin = np.stack([o.linear for o in self.oracles])
                self._std = np.array([o.noise_std for o in self.oracles])
            elif all(isinstance(o, CostOracle) and not o.is_erm
                     for o in self.oracles):
                self.family = "linear"
                self._chol = np.stack([o._chol for o in self.oracles])
                self._wtrue = np.stack([o.model.w_true for o in self.oracles])
                self._groups = self._loss_groups()
                self._mse_cov = None
                if all(o.loss.kind == "mse" for o in self.oracles):
                    self._mse_cov = np.stack(
                        [o.model.regressor_cov for o in self.oracles])

    def _loss_groups(self):
        groups = {}
        for k, o in enumerate(self.oracles):
            key = (o.loss.kind, getattr(o.loss, "c", None))
            groups.setdefault(key, (o.loss, []))[1].append(k)
        return [(loss, np.array(idx)) for loss, idx in groups.values()]

    # -- stochastic gradients, one fresh sample per agent --------------------

    def stochastic(self, W, rngs) -> np.ndarray:
        if self.family == "quadratic":
            g = np.einsum("kij,kj->ki", self._quad, W) + self._lin
            for k, rng in enumerate(rngs):
                if self._std[k] > 0:
                    g[k] += self._std[k] * rng.standard_normal(self.dim)
            return g
        if self.family == "linear":
            H = np.empty((self.n, self.dim))
            v = np.empty(self.n)
            for k, (o, rng) in enumerate(zip(self.oracles, rngs)):
                H[k] = o._chol @ rng.standard_normal(self.dim)
                v[k] = o.model.noise.sample(rng)
            e = (H * (self._wtrue - W)).sum(axis=1) + v
            g = np.empty((self.n, self.dim))
            for loss, idx in self._groups:
                g[idx] = -loss.slope(e[idx])[:, None] * H[idx]
            return g
        return np.stack([o.stochastic_gradient(W[k], rngs[k])
                         for k, o in enumerate(self.oracles)])

    # -- exact gradients ------------------------------------------------------

    def true_at_own(self, W) -> np.ndarray:
        """Exact gradient of each agent's risk at that agent's iterate."""
        if self.family == "quadratic":
            return np.einsum("kij,kj->ki", self._quad, W) + self._lin
        if self.family == "linear" and self._mse_cov is not None:
            return 2.0 * np.einsum("kij,kj->ki", self._mse_cov, W - self._wtrue)
        return np.stack([o.true_gradient(W[k])
                         for k, o in enumerate(self.oracles)])

    def true_at(self, w) -> np.ndarray:
        """Exact gradient of each agent's risk at the common point ``w``."""
        if self.family == "quadratic":
            return self._quad @ w + self._lin
        if self.family == "linear" and self._mse_cov is not None:
            return 2.0 * np.einsum("kij,j->ki", self._mse_cov, w) \
                - 2.0 * np.einsum("kij,kj->ki", self._mse_cov, self._wtrue)
        return np.stack([o.true_gradient(w) for o in self.oracles])

    def risks_at(self, w) -> np.ndarray:
        return np.array([o.risk(w) for o in self.oracles])


def _advance(W, iteration, plan, weights_T, p, config, rngs):
    """One adapt-then-combine step; returns the new state and, when
    recording, the pieces of the step record."""
    ghat = plan.stochastic(W, rngs)
    phi = W - config.mu * ghat
    W_new = phi if weights_T is None else weights_T @ phi
    if not np.isfinite(W_new).all():
        raise NonFiniteIterate(iteration + 1)
    if not config.record_perturbations:
        return W_new, None
    w_c = p @ W
    g_own = plan.true_at_own(W)
    g_cen = plan.true_at(w_c)
    d = p @ (g_own - g_cen)
    s = p @ (ghat - g_own)
    grad = p @ g_cen
    w_c_new = p @ W_new
    cost = float(p @ plan.risks_at(w_c_new))
    return W_new, (w_c_new, d, s, grad, cost)


def atc_step(state, oracles, matrix, config, rng_streams):
    """One diffusion step from ``state``.

    ``matrix`` is a ``CombinationMatrix`` or ``None`` for non-cooperative
    agents (no combine phase, uniform bookkeeping weights).  ``rng_streams``
    holds one positioned generator per agent.  Returns the new state and a
    ``StepRecord`` (``None`` unless the config records perturbations).
    """
    plan = _GradientPlan(oracles)
    weights_T, p = _matrix_arrays(matrix, state.n_agents)
    W_new, rec = _advance(state.iterates, state.iteration, plan, weights_T,
                          p, config, rng_streams)
    new_state = NetworkState(W_new, state.iteration + 1)
    if rec is None:
        return new_state, None
    w_c_new, d, s, grad, cost = rec
    return new_state, StepRecord(w_c_new, d, s, grad, cost)


def _matrix_arrays(matrix, n_agents):
    if matrix is None:
        return None, np.full(n_agents, 1.0 / n_agents)
    return np.ascontiguousarray(matrix.weights.T), matrix.perron


def run(initial, oracles, matrix, config) -> Trajectory:
    """Run the diffusion recursion for ``config.iterations`` steps.

    Deterministic for a fixed ``config.seed``: agent ``k`` consumes the
    stream keyed ``(seed, AGENT_STREAM, k)`` sequentially, one fixed draw
    pattern per iteration, so results do not depend on scheduling.
    """
    W = np.array(initial.iterates, dtype=float)
    n, dim = W.shape
    if len(oracles) != n:
        raise ValueError("oracle count must match the number of agents")
    plan = _GradientPlan(oracles)
    weights_T, p = _matrix_arrays(matrix, n)
    rngs = [make_rng(config.seed, AGENT_STREAM, k) for k in range(n)]

    steps = config.iterations
    iterates = np.empty((steps + 1, n, dim))
    centroids = np.empty((steps + 1, dim))
    iterates[0] = W
    centroids[0] = p @ W
    record = config.record_perturbations
    costs = d_arr = s_arr = grad_arr = None
    if record:
        costs = np.empty(steps + 1)
        costs[0] = float(p @ plan.risks_at(centroids[0]))
        d_arr = np.empty((steps, dim))
        s_arr = np.empty((steps, dim))
        grad_arr = np.empty((steps, dim))

    for i in range(steps):
        W, rec = _advance(W, i, plan, weights_T, p, config, rngs)
        iterates[i + 1] = W
        if record:
            centroids[i + 1], d_arr[i], s_arr[i], grad_arr[i], costs[i + 1] = rec
        else:
            centroids[i + 1] = p @ W

    return Trajectory(mu=config.mu, perron=p.copy(), iterates=iterates,
                      centroids=centroids, costs=costs, d_perturbations=d_arr,
                      s_perturbations=s_arr, centroid_gradients=grad_arr)


def export_trajectory_csv(trajectory: Trajectory, path) -> None:
    """Write one row per iteration: centroid coordinates, perturbation norms,
    centroid-gradient norm and aggregate cost (``nan`` where not recorded)."""
    dim = trajectory.centroids.shape[1]
    header = (["iteration"] + [f"wc_{j}" for j in range(dim)]
              + ["d_norm", "s_norm", "grad_norm", "cost"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(trajectory.n_steps + 1):
            row = [i] + [repr(float(x)) for x in trajectory.centroids[i]]
            if trajectory.has_records and i >= 1:
                row += [repr(float(np.linalg.norm(trajectory.d_perturbations[i - 1]))),
                        repr(float(np.linalg.norm(trajectory.s_perturbations[i - 1]))),
                        repr(float(np.linalg.norm(trajectory.centroid_gradients[i - 1]))),
                        repr(float(trajectory.costs[i]))]
            elif trajectory.has_records:
                row += ["nan", "nan", "nan", repr(float(trajectory.costs[0]))]
            else:
                row += ["nan", "nan", "nan", "nan"]
            writer.writerow(row)

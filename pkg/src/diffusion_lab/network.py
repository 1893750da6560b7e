"""Combination matrices over strongly connected agent networks.

Builds the left-stochastic weight matrix that couples the agents, computes
its agent-weight (Perron) vector and the mixing rate of the graph, and
derives the burn-in horizon after which network disagreement has contracted
to its steady level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from ._rng import TOPOLOGY_STREAM, make_rng

COLUMN_SUM_TOL = 1e-12
PERRON_RESIDUAL_TOL = 1e-10


class NotStronglyConnected(ValueError):
    """The graph is not strongly connected or has no self-loop."""


class InvalidWeights(ValueError):
    """An explicit weight matrix violates stochasticity or sparsity."""


class NoConvergence(RuntimeError):
    """Power iteration exceeded its iteration budget."""


class DegenerateMixing(ValueError):
    """Mixing rate is not strictly below one."""


@dataclass(frozen=True)
class Topology:
    """Undirected agent graph with optional per-agent self-loops.

    Edges are stored as ``(u, v)`` pairs with ``u < v``; self-loops are kept
    separately, one flag per agent.  Instances are immutable and safe to
    share across threads.
    """

    n_agents: int
    edges: frozenset
    self_loops: tuple

    @classmethod
    def create(cls, n_agents, edges, self_loops=True):
        """Normalize and validate an edge list.

        ``self_loops`` may be a single bool (applied to every agent) or a
        per-agent iterable of bools.
        """
        n = int(n_agents)
        if n < 1:
            raise ValueError("n_agents must be positive")
        normalized = set()
        for u, v in edges:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range for {n} agents")
            if u == v:
                raise ValueError("self-loops are declared via self_loops, not edges")
            normalized.add((min(u, v), max(u, v)))
        if isinstance(self_loops, bool):
            loops = (self_loops,) * n
        else:
            loops = tuple(bool(b) for b in self_loops)
            if len(loops) != n:
                raise ValueError("self_loops length must equal n_agents")
        return cls(n, frozenset(normalized), loops)

    def neighbor_sets(self):
        """Neighborhood of each agent, containing the agent itself when it
        has a self-loop."""
        nbrs = [set() for _ in range(self.n_agents)]
        for u, v in self.edges:
            nbrs[u].add(v)
            nbrs[v].add(u)
        for k, loop in enumerate(self.self_loops):
            if loop:
                nbrs[k].add(k)
        return nbrs

    def pattern(self) -> np.ndarray:
        """Boolean matrix of allowed nonzero weight positions."""
        allowed = np.zeros((self.n_agents, self.n_agents), dtype=bool)
        for u, v in self.edges:
            allowed[u, v] = allowed[v, u] = True
        for k, loop in enumerate(self.self_loops):
            if loop:
                allowed[k, k] = True
        return allowed


def is_strongly_connected(pattern: np.ndarray) -> bool:
    """Irreducibility plus at least one positive diagonal entry."""
    if not pattern.diagonal().any():
        return False
    n_comp, _ = connected_components(pattern, directed=True, connection="strong")
    return n_comp == 1


def validate_strong_connectivity(topology: Topology) -> None:
    pattern = topology.pattern()
    if not pattern.diagonal().any():
        raise NotStronglyConnected("no agent has a self-loop")
    if not is_strongly_connected(pattern):
        raise NotStronglyConnected("graph is not strongly connected")
    degrees = pattern.sum(axis=0)
    if (degrees == 0).any():
        raise NotStronglyConnected("an agent has an empty neighborhood")


@dataclass(frozen=True)
class CombinationMatrix:
    """Left-stochastic weight matrix with its cached spectral quantities.

    ``weights[l, k]`` is the weight agent ``k`` assigns to agent ``l``;
    every column sums to one.  ``perron`` is the positive right-eigenvector
    at eigenvalue one normalized to sum one, and ``mixing_rate`` is the
    spectral radius of the weight matrix after removing its consensus
    component.
    """

    weights: np.ndarray
    perron: np.ndarray
    mixing_rate: float

    def __post_init__(self):
        self.weights.setflags(write=False)
        self.perron.setflags(write=False)

    @property
    def n_agents(self) -> int:
        return self.weights.shape[0]


def _uniform_weights(topology: Topology) -> np.ndarray:
    nbrs = topology.neighbor_sets()
    n = topology.n_agents
    A = np.zeros((n, n))
    for k in range(n):
        if not nbrs[k]:
            raise NotStronglyConnected(f"agent {k} has an empty neighborhood")
        w = 1.0 / len(nbrs[k])
        for l in nbrs[k]:
            A[l, k] = w
    return A


def _metropolis_weights(topology: Topology) -> np.ndarray:
    # Degrees count the agent itself when it has a self-loop, so a looped
    # pair graph gets weight 1/2 rather than a periodic permutation.
    nbrs = topology.neighbor_sets()
    deg = [len(s) for s in nbrs]
    n = topology.n_agents
    A = np.zeros((n, n))
    for u, v in topology.edges:
        w = 1.0 / max(deg[u], deg[v])
        A[u, v] = A[v, u] = w
    for k in range(n):
        A[k, k] = 1.0 - (A[:, k].sum() - A[k, k])
    return A


def _validate_explicit(matrix: np.ndarray, topology: Topology) -> np.ndarray:
    A = np.asarray(matrix, dtype=float)
    n = topology.n_agents
    if A.shape != (n, n):
        raise InvalidWeights(f"matrix shape {A.shape} does not match {n} agents")
    if (A < -COLUMN_SUM_TOL).any():
        raise InvalidWeights("negative weights")
    col_err = np.abs(A.sum(axis=0) - 1.0).max()
    if col_err > COLUMN_SUM_TOL:
        raise InvalidWeights(f"columns deviate from stochasticity by {col_err:.3e}")
    allowed = topology.pattern()
    np.fill_diagonal(allowed, True)  # diagonal entries are always permitted
    off = np.abs(A) > COLUMN_SUM_TOL
    if (off & ~allowed).any():
        raise InvalidWeights("nonzero weight outside the topology's edge set")
    return A


def build_combination_matrix(topology, rule="metropolis", matrix=None) -> CombinationMatrix:
    """Construct a combination matrix for ``topology`` under ``rule``.

    Parameters
    ----------
    topology : Topology
        Must pass the strong-connectivity check.
    rule : str
        One of ``"uniform-averaging"``, ``"metropolis"`` or ``"explicit"``.
    matrix : ndarray, optional
        Required for the explicit rule: a column-stochastic matrix whose
        sparsity respects the topology.

    Raises
    ------
    NotStronglyConnected, InvalidWeights, DegenerateMixing, NoConvergence
    """
    validate_strong_connectivity(topology)
    if rule in ("uniform-averaging", "uniform"):
        A = _uniform_weights(topology)
    elif rule == "metropolis":
        A = _metropolis_weights(topology)
    elif rule == "explicit":
        if matrix is None:
            raise InvalidWeights("explicit rule requires a matrix")
        A = _validate_explicit(matrix, topology)
        pattern = np.abs(A) > COLUMN_SUM_TOL
        if not is_strongly_connected(pattern):
            raise NotStronglyConnected("explicit matrix is reducible or loop-free")
    else:
        raise ValueError(f"unknown weight rule {rule!r}")

    p = perron_vector(A)
    lam2 = mixing_rate(A, p)
    if lam2 >= 1.0:
        raise DegenerateMixing(f"mixing rate {lam2} is not below one")
    residual = np.abs(A @ p - p).max()
    if residual > PERRON_RESIDUAL_TOL:
        raise NoConvergence(f"Perron residual {residual:.3e} above tolerance")
    return CombinationMatrix(weights=A, perron=p, mixing_rate=float(lam2))


def perron_vector(A, tol=1e-12, max_iters=None) -> np.ndarray:
    """Positive right-eigenvector of ``A`` at eigenvalue one, summing to one.

    Computed by power iteration with renormalization at every step; the
    default iteration budget scales with the inverse spectral gap.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if n == 1:
        return np.ones(1)
    if max_iters is None:
        lam2_est = _second_eigenvalue_modulus(A)
        gap = max(1.0 - lam2_est, 1e-9)
        max_iters = min(int(100 * n * math.ceil(1.0 / gap)), 10_000_000)
    p = np.full(n, 1.0 / n)
    for _ in range(max_iters):
        nxt = A @ p
        s = nxt.sum()
        if s <= 0 or not np.isfinite(s):
            raise NoConvergence("power iteration produced a degenerate iterate")
        nxt /= s
        if np.abs(A @ nxt - nxt).max() <= tol:
            if (nxt <= 0).any():
                raise NoConvergence("converged vector is not strictly positive")
            return nxt
        p = nxt
    raise NoConvergence(f"no convergence within {max_iters} iterations")


def _second_eigenvalue_modulus(A: np.ndarray) -> float:
    mags = np.sort(np.abs(np.linalg.eigvals(A)))
    return float(mags[-2]) if len(mags) > 1 else 0.0


def mixing_rate(A, p) -> float:
    """Spectral radius of ``A - 1 p^T``, the disagreement contraction rate."""
    A = np.asarray(A, dtype=float)
    p = np.asarray(p, dtype=float)
    B = A - np.outer(np.ones(len(p)), p)
    return float(np.abs(np.linalg.eigvals(B)).max())


def burn_in_horizon(mu: float, lambda2: float) -> int:
    """Iterations until the initial disagreement is negligible.

    Evaluates ``ceil(log(mu^5) / log(lambda2))`` and clamps at zero; exact
    consensus (``lambda2 == 0``) needs no burn-in.
    """
    if mu <= 0:
        raise ValueError("step size must be positive")
    if lambda2 < 0 or lambda2 >= 1:
        raise DegenerateMixing(f"mixing rate {lambda2} outside [0, 1)")
    if lambda2 == 0.0:
        return 0
    horizon = math.ceil(5.0 * math.log(mu) / math.log(lambda2))
    return max(horizon, 0)


def random_geometric_topology(n_agents, seed, radius=None, self_loops=True) -> Topology:
    """Connected random geometric graph on the unit square.

    Grows the connection radius until the graph is connected, so the result
    always passes the strong-connectivity check when self-loops are on.
    """
    rng = make_rng(seed, TOPOLOGY_STREAM)
    points = rng.random((n_agents, 2))
    if radius is None:
        radius = math.sqrt(2.0 * math.log(max(n_agents, 2)) / max(n_agents, 2))
    while True:
        diff = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=2))
        edges = {
            (u, v)
            for u in range(n_agents)
            for v in range(u + 1, n_agents)
            if dist[u, v] <= radius
        }
        topo = Topology.create(n_agents, edges, self_loops)
        try:
            validate_strong_connectivity(topo)
            return topo
        except NotStronglyConnected:
            radius *= 1.25


def load_topology(path, self_loops=True) -> Topology:
    """Read an edge-list file: first line ``N``, then ``u v`` per line.

    A ``u u`` line switches on agent ``u``'s self-loop explicitly;
    ``self_loops`` sets the baseline for all agents.
    """
    with open(path, "r", encoding="utf-8") as fh:
        tokens = [line.split() for line in fh if line.strip()]
    if not tokens:
        raise ValueError(f"{path}: empty topology file")
    n = int(tokens[0][0])
    loops = [bool(self_loops)] * n
    edges = []
    for row in tokens[1:]:
        u, v = int(row[0]), int(row[1])
        if u == v:
            loops[u] = True
        else:
            edges.append((u, v))
    return Topology.create(n, edges, loops)


def load_matrix_csv(path) -> np.ndarray:
    """Read a dense weight matrix from CSV, one row per line."""
    A = np.loadtxt(path, delimiter=",", ndmin=2)
    if A.shape[0] != A.shape[1]:
        raise InvalidWeights(f"{path}: matrix is not square: {A.shape}")
    return A

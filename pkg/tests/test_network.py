import numpy as np
import pytest

from diffusion_lab.network import (CombinationMatrix, DegenerateMixing,
                                   InvalidWeights, NoConvergence,
                                   NotStronglyConnected, Topology,
                                   build_combination_matrix, burn_in_horizon,
                                   load_matrix_csv, load_topology, mixing_rate,
                                   perron_vector, random_geometric_topology)

# columns sum to 1; edges (0,1) and (1,2); every diagonal entry positive
EXPLICIT_3 = np.array([[0.5, 0.25, 0.0],
                       [0.5, 0.5, 0.5],
                       [0.0, 0.25, 0.5]])


def dense_perron(A):
    """Dense eigensolver oracle for the eigenvector at eigenvalue one."""
    vals, vecs = np.linalg.eig(A)
    p = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return p / p.sum()


def test_single_agent_identity():
    topo = Topology.create(1, [], True)
    cm = build_combination_matrix(topo, "uniform-averaging")
    assert cm.weights == pytest.approx(np.array([[1.0]]))
    assert cm.perron == pytest.approx(np.array([1.0]))
    assert cm.mixing_rate == pytest.approx(0.0, abs=1e-12)


def test_complete_graph_uniform_averaging():
    topo = Topology.create(3, [(0, 1), (0, 2), (1, 2)], True)
    cm = build_combination_matrix(topo, "uniform-averaging")
    assert cm.weights == pytest.approx(np.full((3, 3), 1.0 / 3.0))
    assert cm.perron == pytest.approx(np.full(3, 1.0 / 3.0), abs=1e-12)
    assert cm.mixing_rate == pytest.approx(0.0, abs=1e-12)


def test_explicit_three_node_frozen_values():
    topo = Topology.create(3, [(0, 1), (1, 2)], True)
    cm = build_combination_matrix(topo, "explicit", matrix=EXPLICIT_3)
    # frozen from the dense eigendecomposition of this matrix
    assert cm.perron == pytest.approx(np.array([0.25, 0.5, 0.25]), abs=1e-10)
    assert cm.mixing_rate == pytest.approx(0.5, abs=1e-10)
    # and cross-checked against the oracle computed here
    assert cm.perron == pytest.approx(dense_perron(EXPLICIT_3), abs=1e-10)


@pytest.mark.parametrize("seed", range(15))
def test_power_iteration_matches_dense_oracle(seed):
    n = 2 + (seed * 7) % 19
    topo = random_geometric_topology(n, seed=500 + seed)
    rule = "metropolis" if seed % 2 else "uniform-averaging"
    cm = build_combination_matrix(topo, rule)
    assert np.abs(cm.perron - dense_perron(cm.weights)).max() <= 1e-8


@pytest.mark.parametrize("seed", range(8))
def test_combination_matrix_invariants(seed):
    topo = random_geometric_topology(3 + seed, seed=900 + seed)
    cm = build_combination_matrix(topo, "uniform-averaging")
    A, p = cm.weights, cm.perron
    assert np.abs(A.sum(axis=0) - 1.0).max() <= 1e-12
    assert (A >= 0).all()
    assert np.abs(A @ p - p).max() <= 1e-10
    assert (p > 0).all() and p.sum() == pytest.approx(1.0, abs=1e-12)
    assert 0.0 <= cm.mixing_rate < 1.0


@pytest.mark.parametrize("seed", range(5))
def test_metropolis_is_doubly_stochastic(seed):
    topo = random_geometric_topology(4 + 2 * seed, seed=1200 + seed)
    cm = build_combination_matrix(topo, "metropolis")
    n = topo.n_agents
    assert np.abs(cm.weights.sum(axis=1) - 1.0).max() <= 1e-12
    assert cm.perron == pytest.approx(np.full(n, 1.0 / n), abs=1e-10)


def test_mixing_rate_rank_one_matrix():
    n = 4
    A = np.full((n, n), 1.0 / n)
    assert mixing_rate(A, np.full(n, 1.0 / n)) == pytest.approx(0.0, abs=1e-12)


def test_burn_in_frozen_examples():
    assert burn_in_horizon(0.01, 0.5) == 34
    assert burn_in_horizon(0.001, 0.9) == 328
    assert burn_in_horizon(0.37, 0.0) == 0


def test_burn_in_monotone():
    mus = [0.9, 0.1, 0.01, 0.001]
    lambdas = [0.1, 0.5, 0.9, 0.99]
    for lam in lambdas:
        values = [burn_in_horizon(mu, lam) for mu in mus]
        assert values == sorted(values)
    for mu in mus:
        values = [burn_in_horizon(mu, lam) for lam in lambdas]
        assert values == sorted(values)


def test_burn_in_degenerate_mixing():
    with pytest.raises(DegenerateMixing):
        burn_in_horizon(0.01, 1.0)


def test_disconnected_graph_rejected():
    topo = Topology.create(4, [(0, 1), (2, 3)], True)
    with pytest.raises(NotStronglyConnected):
        build_combination_matrix(topo, "uniform-averaging")


def test_loop_free_graph_rejected():
    topo = Topology.create(2, [(0, 1)], False)
    with pytest.raises(NotStronglyConnected):
        build_combination_matrix(topo, "metropolis")


def test_explicit_bad_column_sum_rejected():
    topo = Topology.create(2, [(0, 1)], True)
    bad = np.array([[0.6, 0.5], [0.5, 0.5]])
    with pytest.raises(InvalidWeights):
        build_combination_matrix(topo, "explicit", matrix=bad)


def test_explicit_sparsity_violation_rejected():
    topo = Topology.create(3, [(0, 1)], True)  # no (1, 2) edge
    with pytest.raises(InvalidWeights):
        build_combination_matrix(topo, "explicit", matrix=EXPLICIT_3)


def test_power_iteration_periodic_no_convergence():
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    with pytest.raises(NoConvergence):
        perron_vector(A, max_iters=50)


def test_topology_file_round_trip(tmp_path):
    path = tmp_path / "graph.txt"
    path.write_text("3\n0 1\n1 2\n1 1\n")
    topo = load_topology(path, self_loops=False)
    assert topo.n_agents == 3
    assert topo.edges == frozenset({(0, 1), (1, 2)})
    assert topo.self_loops == (False, True, False)


def test_matrix_csv_round_trip(tmp_path):
    path = tmp_path / "weights.csv"
    np.savetxt(path, EXPLICIT_3, delimiter=",")
    assert load_matrix_csv(path) == pytest.approx(EXPLICIT_3)


def test_matrix_is_immutable():
    topo = Topology.create(2, [(0, 1)], True)
    cm = build_combination_matrix(topo, "metropolis")
    with pytest.raises(ValueError):
        cm.weights[0, 0] = 2.0

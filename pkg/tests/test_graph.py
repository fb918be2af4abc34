import math

import numpy as np
import pytest
from scipy.sparse.csgraph import shortest_path

from ctxseg.graph import (
    ContractError,
    EmptyGraphError,
    build_context_graph,
    graph_from_coords,
    graph_stats,
    hop_distances,
    k_hop_neighborhood,
    normalize_adjacency,
)
from ctxseg.synthwsi import GeneratorParams, generate_slide, tile_slide


def full_grid(rows, cols):
    return graph_from_coords([(r, c) for r in range(rows) for c in range(cols)])


def random_coords(rng, side=8, p=0.6):
    mask = rng.random((side, side)) < p
    mask[0, 0] = True
    return [tuple(rc) for rc in np.argwhere(mask).tolist()]


class TestBuild:
    def test_full_2x2(self):
        g = full_grid(2, 2)
        assert (g.n_nodes, len(g.edges)) == (4, 4)

    def test_full_3x3(self):
        g = full_grid(3, 3)
        assert (g.n_nodes, len(g.edges)) == (9, 12)

    def test_diagonal_pair(self):
        g = graph_from_coords([(0, 0), (1, 1)])
        assert (g.n_nodes, len(g.edges)) == (2, 0)

    def test_empty(self):
        with pytest.raises(EmptyGraphError):
            graph_from_coords([])

    def test_edges_are_unit_steps(self):
        rng = np.random.default_rng(5)
        coords = random_coords(rng)
        g = graph_from_coords(coords)
        expected = {(i, j) for i in range(len(coords)) for j in range(i + 1, len(coords))
                    if abs(coords[i][0] - coords[j][0]) + abs(coords[i][1] - coords[j][1]) == 1}
        assert set(g.edges) == expected

    def test_from_generated_slide(self):
        s = generate_slide(GeneratorParams(), 2)
        grid = tile_slide(s, 32)
        g = build_context_graph(grid)
        assert list(g.coords) == grid.coords
        assert g.n_nodes == grid.n_foreground


class TestNormalize:
    def test_single_node(self):
        assert normalize_adjacency(np.zeros((1, 1))).tolist() == [[1.0]]

    def test_pair(self):
        assert normalize_adjacency(np.array([[0, 1], [1, 0]])).tolist() == [[0.5, 0.5], [0.5, 0.5]]

    def test_path(self):
        A = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
        N = normalize_adjacency(A)
        assert N[0, 0] == 0.5
        assert N[0, 1] == pytest.approx(1 / math.sqrt(6), abs=1e-15)
        assert N[0, 1] == pytest.approx(0.4082, abs=1e-4)
        assert N[1, 1] == pytest.approx(1 / 3, abs=1e-15)
        assert N[0, 2] == 0.0

    def test_asymmetric(self):
        with pytest.raises(ContractError):
            normalize_adjacency(np.array([[0, 1], [0, 0]]))

    def test_matches_matrix_form(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            g = graph_from_coords(random_coords(rng))
            A_hat = g.adjacency + np.eye(g.n_nodes)
            D = np.diag(1.0 / np.sqrt(A_hat.sum(axis=1)))
            assert np.allclose(g.norm_adjacency, D @ A_hat @ D, atol=1e-15)

    def test_symmetry_and_diagonal_law_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            g = graph_from_coords(random_coords(rng, side=12))
            N = g.norm_adjacency
            assert np.abs(N - N.T).max() == 0.0
            assert all(N[i, i] == 1.0 / (d + 1) for i, d in enumerate(g.degrees))


class TestHops:
    def test_path_neighbour(self):
        g = graph_from_coords([(0, 0), (0, 1), (0, 2)])
        assert k_hop_neighborhood(g, 0, 1) == {1}
        assert k_hop_neighborhood(g, 0, 0) == {0}

    def test_manhattan_on_full_grid(self):
        g = full_grid(5, 6)
        idx = g.index_of()
        assert hop_distances(g, idx[(0, 0)])[idx[(2, 1)]] == 3
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = rng.integers(0, 30, 2)
            (ra, ca), (rb, cb) = g.coords[a], g.coords[b]
            assert hop_distances(g, a)[b] == abs(ra - rb) + abs(ca - cb)

    def test_disconnected(self):
        g = graph_from_coords([(0, 0), (5, 5)])
        for t in range(5):
            assert 1 not in k_hop_neighborhood(g, 0, t)

    def test_invalid_node(self):
        with pytest.raises(IndexError):
            k_hop_neighborhood(full_grid(2, 2), 4, 1)

    def test_bfs_matches_scipy_and_partitions_component(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            g = graph_from_coords(random_coords(rng, side=10, p=0.55))
            oracle = shortest_path(g.adjacency, unweighted=True)
            for i in rng.integers(0, g.n_nodes, 5):
                d = hop_distances(g, int(i))
                ref = np.where(np.isinf(oracle[i]), -1, oracle[i]).astype(int)
                assert np.array_equal(d, ref)
                sets = [k_hop_neighborhood(g, int(i), t) for t in range(int(d.max()) + 1)]
                union = set().union(*sets)
                assert sum(len(s) for s in sets) == len(union)
                assert union == set(np.flatnonzero(d >= 0).tolist())


def test_stats():
    g = graph_from_coords([(0, 0), (0, 1), (1, 0), (5, 5)])
    assert graph_stats(g) == {
        "nodes": 4, "edges": 2,
        "degree_histogram": {"0": 1, "1": 2, "2": 1, "3": 0, "4": 0},
        "components": 2,
    }

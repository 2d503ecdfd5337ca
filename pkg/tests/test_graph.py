import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from muffliato import graph
from muffliato.errors import DisconnectedAfterRetries, EmptyInput, InvalidParameter


def test_hypercube_structure():
    g = graph.gen_hypercube(4)
    assert g.n == 16 and g.num_edges == 32
    assert set(g.degrees.tolist()) == {4}
    for u, w in g.edges:
        assert bin(u ^ w).count("1") == 1


def test_small_generators():
    assert graph.gen_complete(4).num_edges == 6
    assert graph.gen_ring(5).num_edges == 5
    assert graph.gen_path(5).num_edges == 4
    star = graph.gen_star(3)
    assert star.n == 4 and star.degrees[0] == 3
    assert graph.gen_grid(3, 4).num_edges == 3 * 3 + 2 * 4
    assert graph.gen_torus([4, 4]).num_edges == 32
    with pytest.raises(InvalidParameter):
        graph.gen_ring(2)


def test_torus_short_side_does_not_wrap():
    g = graph.gen_torus([2, 5])
    assert g.num_edges == 5 + 2 * 5
    assert g.connected


def test_graph_rejects_bad_edges():
    with pytest.raises(InvalidParameter):
        graph.Graph(3, [(0, 0)])
    with pytest.raises(InvalidParameter):
        graph.Graph(3, [(0, 1), (1, 0)])
    with pytest.raises(InvalidParameter):
        graph.Graph(3, [(0, 3)])


def test_erdos_renyi_deterministic_and_connected():
    a = graph.gen_erdos_renyi(64, 0.1, seed=3)
    b = graph.gen_erdos_renyi(64, 0.1, seed=3)
    assert a.same_as(b)
    assert a.connected


def test_erdos_renyi_gives_up():
    with pytest.raises(DisconnectedAfterRetries):
        graph.gen_erdos_renyi(30, 1e-4, seed=0, max_attempts=5)


def test_erdos_renyi_edge_frequency_matches_q():
    # one coin per pair: the mean edge count over many draws is q * n(n-1)/2
    rng = np.random.default_rng(0)
    n, q = 20, 0.3
    counts = [len(graph.sample_erdos_renyi_edges(n, q, rng)) for _ in range(2000)]
    pairs = n * (n - 1) / 2
    se = math.sqrt(pairs * q * (1 - q) / 2000)
    assert abs(np.mean(counts) - q * pairs) < 5 * se


def test_erdos_renyi_pairs_uniform():
    rng = np.random.default_rng(1)
    hits = np.zeros((6, 6))
    for _ in range(3000):
        for u, w in graph.sample_erdos_renyi_edges(6, 0.5, rng):
            assert u < w
            hits[u, w] += 1
    iu = np.triu_indices(6, 1)
    assert np.allclose(hits[iu] / 3000, 0.5, atol=0.05)


def test_triu_pair_matches_numpy():
    for k in (2, 3, 7, 50):
        lin = np.arange(k * (k - 1) // 2)
        i, j = graph._triu_pair(lin, k)
        ti, tj = np.triu_indices(k, 1)
        assert np.array_equal(i, ti) and np.array_equal(j, tj)


def test_geometric_graph_uses_strict_radius():
    g = graph.gen_geometric(40, 0.4, seed=2)
    pos = g.positions
    for u in range(g.n):
        for w in range(u + 1, g.n):
            near = np.linalg.norm(pos[u] - pos[w]) < 0.4
            assert near == g.has_edge(u, w)


def test_from_edge_list_compacts_ids_and_drops_noise():
    g = graph.from_edge_list([(10, 20), (20, 10), (20, 20), (20, 30)])
    assert g.n == 3
    assert sorted(g.edges) == [(0, 1), (1, 2)]
    with pytest.raises(EmptyInput):
        graph.from_edge_list([])
    with pytest.raises(InvalidParameter):
        graph.from_edge_list([(-1, 2)])


def test_giant_component():
    g = graph.from_edge_list([(5, 6), (7, 8), (8, 9)], giant_component=True)
    assert g.n == 3 and g.num_edges == 2
    # tie between equal components goes to the one holding the smallest original id
    tie = graph.from_edge_list([(7, 8), (1, 2)], giant_component=True)
    assert tie.n == 2


def test_edge_list_and_json_round_trip(tmp_path):
    g = graph.gen_grid(3, 3)
    p = tmp_path / "g.txt"
    graph.write_edge_list(g, p)
    back = graph.read_edge_list(p)
    # ids are relabeled in order of first appearance: 0, 1, 3, 2, 4, ...
    order = []
    for e in g.edges:
        order += [x for x in e if x not in order]
    relabel = {old: new for new, old in enumerate(order)}
    assert back.same_as(graph.Graph(g.n, [(relabel[u], relabel[w]) for u, w in g.edges]))
    text = json.dumps(graph.graph_to_json(g))
    assert graph.graph_from_json(text).same_as(g)


def test_read_edge_list_skips_comments(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("# header\n0 1\n\n1 2\n")
    assert graph.read_edge_list(p).num_edges == 2


def test_bfs_on_ring_and_disconnected():
    g = graph.gen_ring(8)
    d = graph.bfs_distances(g, 0).dist
    assert d.tolist() == [0, 1, 2, 3, 4, 3, 2, 1]
    h = graph.Graph(3, [(0, 1)])
    assert graph.bfs_distances(h, 0).dist[2] == graph.UNREACHABLE


def test_hypercube_distance_is_hamming():
    g = graph.gen_hypercube(5)
    D = graph.all_pairs_distances(g)
    for u in range(g.n):
        for w in range(g.n):
            assert D[u, w] == bin(u ^ w).count("1")


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 25), st.floats(0.0, 1.0), st.integers(0, 10_000))
def test_sampled_edges_are_valid(n, q, seed):
    e = graph.sample_erdos_renyi_edges(n, q, np.random.default_rng(seed))
    assert e.shape[1] == 2
    assert np.all(e[:, 0] < e[:, 1]) and np.all(e[:, 1] < n)
    assert len({tuple(x) for x in e.tolist()}) == len(e)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 12), st.integers(0, 12)), min_size=1, max_size=40))
def test_distances_symmetric_and_triangle(pairs):
    if all(a == b for a, b in pairs):
        return
    g = graph.from_edge_list(pairs, giant_component=True)
    D = graph.all_pairs_distances(g)
    assert np.array_equal(D, D.T)
    reach = D != graph.UNREACHABLE
    for u, w in g.edges:
        assert D[u, w] == 1
        both = reach[u] & reach[w]
        assert np.all(np.abs(D[u, both] - D[w, both]) <= 1)

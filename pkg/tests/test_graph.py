import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmp import autodiff as ad
from pmp.graph import GraphTopology, add_noise_edges, batch, fully_connected, init_state, undirected
from pmp.nn import MLP


def test_fully_connected_counts():
    assert fully_connected(3).n_edges == 6
    assert fully_connected(25).n_edges == 600
    np.testing.assert_array_equal(fully_connected(2).edges, [[0, 1], [1, 0]])


def test_fully_connected_is_lexicographic():
    e = fully_connected(5).edges
    codes = e[:, 0] * 5 + e[:, 1]
    assert np.all(np.diff(codes) > 0)


def test_fully_connected_rejects_tiny():
    with pytest.raises(ValueError):
        fully_connected(1)


@pytest.mark.parametrize("edges", [[[0, 0]], [[0, 1], [0, 1]], [[0, 3]]])
def test_topology_invariants(edges):
    with pytest.raises(ValueError):
        GraphTopology(3, np.array(edges))


def test_neighbor_index_lists_incoming_edges():
    topo = GraphTopology(3, np.array([[0, 1], [2, 1], [1, 0]]))
    assert [list(x) for x in topo.neighbor_index] == [[2], [0, 1], []]


def test_noise_zero_ratio_is_identity():
    topo = fully_connected(4)
    out = add_noise_edges(GraphTopology(6, topo.edges), 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(out.edges, topo.edges)


def test_noise_doubles_ten_edges():
    topo = undirected(10, np.array([[i, i + 1] for i in range(5)]))
    assert topo.n_edges == 10
    out = add_noise_edges(topo, 1.0, np.random.default_rng(0))
    assert out.n_edges == 20


def test_noise_is_deterministic_per_seed():
    topo = undirected(30, np.array([[i, (i + 1) % 30] for i in range(30)]))
    a = add_noise_edges(topo, 0.5, np.random.default_rng(3))
    b = add_noise_edges(topo, 0.5, np.random.default_rng(3))
    np.testing.assert_array_equal(a.edges, b.edges)


@pytest.mark.parametrize("ratio", [0.5, 1.0, 2.0])
def test_noise_preserves_and_extends(ratio):
    topo = undirected(40, np.array([[i, (i + 3) % 40] for i in range(40)]))
    out = add_noise_edges(topo, ratio, np.random.default_rng(1))
    assert out.n_edges == topo.n_edges + int(np.floor(ratio * topo.n_edges))
    np.testing.assert_array_equal(out.edges[:topo.n_edges], topo.edges)
    # GraphTopology itself rejects duplicates and self-loops


def test_noise_needs_room():
    with pytest.raises(ValueError, match="absent"):
        add_noise_edges(fully_connected(4), 0.5, np.random.default_rng(0))


def test_init_state_zero_features_zero_bias():
    rng = np.random.default_rng(0)
    enc = MLP(rng, [7, 50, 50])
    s = init_state(np.zeros((9, 7), dtype=np.float32), fully_connected(9), enc)
    assert s.V.shape == (9, 50)
    assert np.all(s.V.data == 0)
    assert np.all(s.u.data == 0)


def test_init_state_row_mismatch():
    enc = MLP(np.random.default_rng(0), [3, 4])
    with pytest.raises(ValueError):
        init_state(np.zeros((2, 3), dtype=np.float32), fully_connected(3), enc)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 12), seed=st.integers(0, 1000))
def test_init_state_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    enc = MLP(rng, [5, 8, 8])
    for p in enc.parameters():
        p.data += rng.standard_normal(p.shape).astype(p.data.dtype)
    X = rng.standard_normal((n, 5)).astype(np.float32)
    perm = rng.permutation(n)
    topo = fully_connected(n)
    a = init_state(X[perm], topo, enc).V.data
    b = init_state(X, topo, enc).V.data[perm]
    np.testing.assert_array_equal(a, b)


def test_text_round_trip(tmp_path):
    topo = add_noise_edges(undirected(12, np.array([[0, 5], [3, 4], [7, 11]])), 2.0, np.random.default_rng(0))
    topo.save(tmp_path / "g.txt")
    back = GraphTopology.load(tmp_path / "g.txt")
    assert back.n_nodes == topo.n_nodes
    np.testing.assert_array_equal(back.edges, topo.edges)
    assert back.to_text() == topo.to_text()
    assert topo.to_text().splitlines()[0] == f"12 {topo.n_edges}"


def test_batch_offsets_graphs():
    b = batch([fully_connected(2), fully_connected(3)])
    assert b.n_nodes == 5 and b.n_edges == 8 and b.n_graphs == 2
    np.testing.assert_array_equal(b.node_graph, [0, 0, 1, 1, 1])
    assert b.edges.min() == 0 and set(b.edges[2:].ravel()) == {2, 3, 4}

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pmp.data import Example, collate, load_dataset, save_dataset
from pmp.graph import GraphTopology
from pmp.tasks.generate import make_dataset
from pmp.tasks.metrics import assign_positions, kendall_tau, per_node_accuracy
from pmp.tasks.nodeclass import gen_community, load_cora, split_per_class
from pmp.tasks.puzzle import TextureSpec, feature_dim as puzzle_dim, gen_puzzle, split_patches, synthetic_texture
from pmp.tasks.whereami import feature_dim, gen_where_am_i, overlap_linked, propagate_candidates


def tau_by_pairs(a, b):
    score = 0
    for i, j in itertools.combinations(range(len(a)), 2):
        score += 1 if (a[i] - a[j]) * (b[i] - b[j]) > 0 else -1
    return score / (len(a) * (len(a) - 1) / 2)


def test_kendall_tau_small_exhaustive():
    for n in range(2, 6):
        ident = np.arange(n)
        for p in itertools.permutations(range(n)):
            assert kendall_tau(np.array(p), ident) == pytest.approx(tau_by_pairs(p, ident), abs=1e-12)


def test_kendall_tau_known_values():
    assert kendall_tau([0, 1, 2, 3], [0, 1, 2, 3]) == 1.0
    assert kendall_tau([3, 2, 1, 0], [0, 1, 2, 3]) == -1.0
    assert kendall_tau([0, 2, 1], [0, 1, 2]) == pytest.approx(1 / 3)


@pytest.mark.parametrize("a,b", [([0], [0]), ([0, 0], [0, 1]), ([0, 1], [0, 1, 2]), ([0, 1], [1, 2])])
def test_kendall_tau_rejects_bad_input(a, b):
    with pytest.raises(ValueError):
        kendall_tau(a, b)


def test_accuracy_and_ties():
    logits = np.array([[1.0, 1.0], [0.0, 2.0], [3.0, 0.0]])
    assert per_node_accuracy(logits, [0, 1, 1], [True, True, True]) == pytest.approx(2 / 3)
    assert per_node_accuracy(logits, [0, 1, 1], [True, True, False]) == 1.0
    with pytest.raises(ValueError):
        per_node_accuracy(logits, [0, 1, 1], [False] * 3)


def test_assign_positions_is_a_permutation():
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(9), size=9)
    perm = assign_positions(probs)
    assert sorted(perm) == list(range(9))
    # brute force on a smaller case
    p4 = rng.dirichlet(np.ones(4), size=4)
    best = max(itertools.permutations(range(4)), key=lambda s: sum(np.log(p4[i, s[i]]) for i in range(4)))
    assert list(assign_positions(p4)) == list(best)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_where_am_i_invariants(seed):
    inst = gen_where_am_i(6, 9, 4, np.random.default_rng(seed))
    assert len({tuple(p) for p in inst.positions}) == 9
    assert overlap_linked(inst.positions)
    assert inst.glyphs.min() >= 1 and inst.glyphs.max() <= 4
    f = inst.features()
    assert f.shape == (9, feature_dim(6, 4))
    # anchor flag and position slot
    assert f[:, 45].sum() == 1 and f[inst.anchor, 45] == 1
    r, c = inst.positions[inst.anchor]
    assert f[inst.anchor, 46 + r] == 1 and f[inst.anchor, 52 + c] == 1
    others = np.delete(np.arange(9), inst.anchor)
    assert not f[others, 46:].any()
    # center of every context is the object itself
    np.testing.assert_array_equal(inst.contexts()[:, 1, 1], inst.glyphs)
    # oracle reaches every object and always contains the truth
    cand = propagate_candidates(inst)
    for i, p in enumerate(inst.positions):
        assert tuple(p) in cand[i]
    ex = inst.to_example()
    assert not ex.mask[inst.anchor] and ex.mask.sum() == 8
    assert ex.topo.n_edges == 72


def test_where_am_i_edge_cases():
    one = gen_where_am_i(3, 1, 2, np.random.default_rng(0))
    assert one.to_example().mask.sum() == 0
    with pytest.raises(ValueError):
        gen_where_am_i(2, 5, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        gen_where_am_i(6, 9, 1, np.random.default_rng(0))


def test_where_am_i_is_seeded():
    a = gen_where_am_i(6, 9, 4, np.random.default_rng(7))
    b = gen_where_am_i(6, 9, 4, np.random.default_rng(7))
    np.testing.assert_array_equal(a.features(), b.features())


def test_puzzle_round_trip():
    spec = TextureSpec(48, 1, 4.0)
    img = synthetic_texture(spec, np.random.default_rng(0))
    assert img.shape == (48, 48, 1) and img.min() == 0.0 and img.max() == pytest.approx(1.0)
    inst = gen_puzzle(img, 3, np.random.default_rng(1))
    np.testing.assert_array_equal(inst.reassemble(), img)
    assert sorted(inst.targets) == list(range(9))
    assert inst.features.shape == (9, puzzle_dim(spec, 3))
    ex = inst.to_example()
    assert ex.mask.all() and ex.topo.n_edges == 72


def test_split_patches_rejects_ragged():
    with pytest.raises(ValueError):
        split_patches(np.zeros((10, 10)), 3)


def test_community_split_and_structure():
    inst = gen_community(np.random.default_rng(0))
    assert inst.topo.n_nodes == 400 and inst.n_classes == 4
    train = inst.mask("train")
    assert np.bincount(inst.targets[train]).tolist() == [20] * 4
    assert inst.mask("val").sum() == 80 and inst.mask("test").sum() == 200
    src, dst = inst.topo.src, inst.topo.dst
    same = (inst.targets[src] == inst.targets[dst]).mean()
    assert same > 0.7
    noisy = inst.with_noise(1.0, np.random.default_rng(1))
    assert noisy.topo.n_edges == 2 * inst.topo.n_edges
    np.testing.assert_array_equal(noisy.topo.edges[:inst.topo.n_edges], inst.topo.edges)


def test_split_per_class_needs_enough_nodes():
    with pytest.raises(ValueError):
        split_per_class(np.array([0, 1, 0, 1]), 1, 2, 2)


def _write_cora(tmp_path, cites):
    content = tmp_path / "toy.content"
    content.write_text("".join(f"p{i} {i % 2} {(i + 1) % 2} 1 {'A' if i < 4 else 'B'}\n" for i in range(8)))
    path = tmp_path / "toy.cites"
    path.write_text(cites)
    return content, path


def test_load_cora_fixture(tmp_path, caplog):
    content, cites = _write_cora(tmp_path, "p0 p1\np1 p2\np5 p6\np9 p0\n")
    inst = load_cora(content, cites, n_train_per_class=1, n_val=2, n_test=3)
    assert inst.features.shape == (8, 3)
    assert inst.targets.tolist() == [0] * 4 + [1] * 4
    assert inst.topo.n_edges == 6
    assert inst.skipped_citations == 1
    assert "skipped 1" in caplog.text
    assert inst.node_split.tolist() == [0, 1, 1, 2, 0, 2, 2, -1]


def test_load_cora_reports_line_numbers(tmp_path):
    content, cites = _write_cora(tmp_path, "p0 p1\np1\n")
    with pytest.raises(ValueError, match=":2:"):
        load_cora(content, cites, n_train_per_class=1, n_val=1, n_test=1)


def test_dataset_round_trip(tmp_path):
    examples, meta = make_dataset("whereami", 3, n_train=3, n_val=1, n_test=2)
    path = tmp_path / "w.pmpd"
    save_dataset(path, examples, "whereami", meta)
    back, meta2 = load_dataset(path)
    assert meta2["n_classes"] == 36 and meta2["task"] == "whereami"
    assert [e.split for e in back] == ["train"] * 3 + ["val"] + ["test"] * 2
    for a, b in zip(examples, back):
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.targets, b.targets)
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.topo.edges, b.topo.edges)


def test_dataset_truncation_is_detected(tmp_path):
    examples, meta = make_dataset("puzzle", 0, n_train=2, n_val=0, n_test=0, size=12, d=2)
    path = tmp_path / "p.pmpd"
    save_dataset(path, examples, "puzzle", meta)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(ValueError):
        load_dataset(path)


def test_make_dataset_rejects_unknown():
    with pytest.raises(ValueError):
        make_dataset("whereami", 0, colour=3)
    with pytest.raises(ValueError):
        make_dataset("mnist", 0)


def test_collate_offsets_nodes():
    a = Example(np.zeros((2, 1)), GraphTopology(2, np.array([[0, 1]])), np.array([0, 1]), np.ones(2, bool))
    b = Example(np.ones((3, 1)), GraphTopology(3, np.array([[2, 0]])), np.array([1, 1, 0]), np.ones(3, bool))
    packed = collate([a, b])
    assert packed.topo.n_graphs == 2
    np.testing.assert_array_equal(packed.topo.edges, [[0, 1], [4, 2]])
    np.testing.assert_array_equal(packed.topo.node_graph, [0, 0, 1, 1, 1])

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossgae.graphdata import (FormatError, Graph, GraphSet, IngestionError, SpecError, SyntheticSpec,
                                degree_one_hot_features, is_topologically_symmetric, load_tu_dataset,
                                make_synthetic, make_synthetic_with_symmetry, protein_like_dataset,
                                sample_subgraphs, special_structure_suite, split, with_degree_features,
                                write_tu_dataset)

PROTEINS_DIR = os.environ.get("CROSSGAE_PROTEINS_DIR")


def _write(d: Path, name: str, files: dict[str, str]) -> None:
    for suffix, text in files.items():
        (d / f"{name}_{suffix}.txt").write_text(text)


def test_toy_directory_gives_two_undirected_edges(tmp_path):
    _write(tmp_path, "TOY", {"A": "1, 2\n3, 4\n", "graph_indicator": "1\n1\n2\n2\n"})
    gs = load_tu_dataset(tmp_path, "TOY")
    assert len(gs) == 2
    for g in gs:
        assert g.n == 2
        assert np.array_equal(g.adjacency, [[0, 1], [1, 0]])
        assert not g.directed


def test_out_of_range_node_is_a_format_error_with_line(tmp_path):
    _write(tmp_path, "BAD", {"A": "1, 2\n3, 5\n", "graph_indicator": "1\n1\n2\n2\n"})
    with pytest.raises(FormatError, match=r"BAD_A.txt:2"):
        load_tu_dataset(tmp_path, "BAD")


def test_missing_file_is_named(tmp_path):
    _write(tmp_path, "M", {"A": "1, 2\n"})
    with pytest.raises(IngestionError, match="M_graph_indicator.txt"):
        load_tu_dataset(tmp_path, "M")


def test_node_labels_become_one_hot_and_labels_are_remapped(tmp_path):
    _write(tmp_path, "L", {"A": "1, 2\n2, 1\n2, 3\n", "graph_indicator": "1\n1\n1\n2\n",
                           "node_labels": "0\n2\n1\n0\n", "graph_labels": "-1\n1\n"})
    gs = load_tu_dataset(tmp_path, "L")
    assert gs.feature_dim == 3 and gs.num_classes == 2
    assert np.array_equal(gs.graphs[0].features, np.eye(3)[[0, 2, 1]])
    assert [g.label for g in gs] == [0, 1]
    assert gs.graphs[0].num_edges() == 2
    assert gs.graphs[1].n == 1


def test_directed_loading_keeps_orientation(tmp_path):
    _write(tmp_path, "D", {"A": "1, 2\n", "graph_indicator": "1\n1\n"})
    g = load_tu_dataset(tmp_path, "D", directed=True).graphs[0]
    assert np.array_equal(g.adjacency, [[0, 1], [0, 0]])


@pytest.mark.parametrize("kind", ["axisymmetric", "directed-random", "erdos-renyi", "island"])
def test_round_trip_through_tu_files(tmp_path, kind):
    graphs = [make_synthetic(SyntheticSpec(kind, 7, 0.4, s, 5, s)) for s in range(4)]
    labeled = [Graph(g.id, g.features, g.adjacency, g.directed, g.id % 2) for g in graphs]
    gs = GraphSet(labeled, labeled[0].feature_dim, 2, "RT")
    write_tu_dataset(gs, tmp_path, "RT")
    back = load_tu_dataset(tmp_path, "RT", directed=kind == "directed-random")
    assert len(back) == len(gs)
    for a, b in zip(gs, back):
        assert np.array_equal(a.adjacency, b.adjacency)
        assert np.array_equal(a.features, b.features)
        assert a.label == b.label


def test_graph_invariants_are_enforced():
    with pytest.raises(SpecError):
        Graph(0, np.ones((2, 1)), np.array([[0, 1], [0, 0]]), directed=False)
    with pytest.raises(SpecError):
        Graph(0, np.ones((3, 1)), np.zeros((2, 2)))
    with pytest.raises(SpecError):
        Graph(0, np.ones((2, 1)), np.array([[0, 2], [2, 0]]))
    with pytest.raises(SpecError):
        GraphSet([Graph(0, np.ones((1, 1)), np.zeros((1, 1))), Graph(0, np.ones((1, 1)), np.zeros((1, 1)))], 1)


def test_degree_one_hot_examples():
    tri = Graph(0, np.ones((3, 1)), np.ones((3, 3), dtype=np.int8) - np.eye(3, dtype=np.int8))
    assert np.array_equal(degree_one_hot_features(tri, 3), np.tile([0, 0, 1, 0], (3, 1)))
    island = Graph(1, np.ones((1, 1)), np.zeros((1, 1)))
    assert np.array_equal(degree_one_hot_features(island, 2), [[1, 0, 0]])
    star = Graph(2, np.ones((4, 1)), np.array([[0, 1, 1, 1], [1, 0, 0, 0], [1, 0, 0, 0], [1, 0, 0, 0]]))
    assert np.array_equal(degree_one_hot_features(star, 2)[0], [0, 0, 1])  # clamps into the last bucket
    gs = with_degree_features(GraphSet([tri, island], 1), 134)
    assert gs.feature_dim == 135


def test_axisymmetric_twins_share_rows_and_features():
    g, info = make_synthetic_with_symmetry(SyntheticSpec("axisymmetric", 5, 0.5, 3))
    assert len(info.axis) == 1 and len(info.pairs) == 2
    assert is_topologically_symmetric(g, info)
    for l, r in info.pairs:
        assert np.array_equal(g.adjacency[l], g.adjacency[r])
        assert np.array_equal(g.features[l], g.features[r])
    assert not np.any(np.diag(g.adjacency))


def test_island_and_directed_examples():
    assert not make_synthetic(SyntheticSpec("island", 4, 0.0, 0)).adjacency.any()
    g = make_synthetic(SyntheticSpec("island", 8, 0.6, 0))
    assert (g.adjacency.sum(axis=0) + g.adjacency.sum(axis=1) == 0).any()
    d = make_synthetic(SyntheticSpec("directed-random", 16, 0.3, 7))
    assert d.directed and not np.array_equal(d.adjacency, d.adjacency.T)


def test_symmetric_kind_needs_two_nodes():
    with pytest.raises(SpecError):
        make_synthetic(SyntheticSpec("axisymmetric", 1, 0.5, 0))


@given(st.sampled_from(["axisymmetric", "centrosymmetric"]), st.integers(2, 12), st.floats(0, 1),
       st.integers(0, 10_000))
def test_symmetric_generators_pass_the_symmetry_check(kind, n, p, seed):
    spec = SyntheticSpec(kind, n, p, seed)
    g, info = make_synthetic_with_symmetry(spec)
    assert is_topologically_symmetric(g, info)
    assert not np.any(np.diag(g.adjacency))
    g2, _ = make_synthetic_with_symmetry(spec)
    assert np.array_equal(g.adjacency, g2.adjacency) and np.array_equal(g.features, g2.features)


def test_special_structure_suite():
    suite = special_structure_suite(0)
    assert len(suite) == 4
    assert len({g.feature_dim for g, _ in suite}) == 1
    for g, info in suite:
        assert is_topologically_symmetric(g, info)
        assert not np.any(np.diag(g.adjacency))
    last, _ = suite[3]
    assert last.adjacency[0].sum() == 0  # an island on the axis


def test_sample_subgraphs_contract():
    host = make_synthetic(SyntheticSpec("directed-random", 100, 0.05, 1))
    gs = sample_subgraphs(host, 10, (10, 20), seed=4)
    assert len(gs) == 10
    assert all(10 <= g.n <= 20 and g.directed for g in gs)
    again = sample_subgraphs(host, 10, (10, 20), seed=4)
    assert all(np.array_equal(a.adjacency, b.adjacency) for a, b in zip(gs, again))
    assert len(sample_subgraphs(host, 0, (10, 20), 0)) == 0
    with pytest.raises(SpecError):
        sample_subgraphs(host, 1, (10, 200), 0)


def test_subgraphs_are_induced():
    host = make_synthetic(SyntheticSpec("erdos-renyi", 30, 0.2, 2))
    gs = sample_subgraphs(host, 5, (6, 8), seed=0)
    for g in gs:
        rows = [int(np.flatnonzero((host.features == f).all(axis=1))[0]) for f in g.features]
        assert np.array_equal(host.adjacency[np.ix_(rows, rows)], g.adjacency)


def test_split_examples():
    gs = GraphSet([Graph(i, np.ones((1, 1)), np.zeros((1, 1))) for i in range(1000)], 1)
    tr, te = split(gs, 0.8, 0)
    assert (len(tr), len(te)) == (800, 200)
    assert not {g.id for g in tr} & {g.id for g in te}
    a, b = split(gs[:64], 0.5, 3), split(gs[:64], 0.5, 3)
    assert [g.id for g in a[0]] == [g.id for g in b[0]]
    small = split(gs[:3], 0.5, 0)
    assert sorted(map(len, small)) == [1, 2]


def test_protein_like_statistics():
    gs = protein_like_dataset()
    assert len(gs) == 1113 and gs.feature_dim == 3 and gs.num_classes == 2
    assert 35 < gs.mean_nodes() < 45
    frac0 = np.mean([g.label == 0 for g in gs])
    assert abs(frac0 - 0.596) < 0.03
    assert all(not np.any(np.diag(g.adjacency)) for g in gs)


@pytest.mark.skipif(not PROTEINS_DIR, reason="set CROSSGAE_PROTEINS_DIR to a TU PROTEINS directory")
def test_real_proteins_summary():
    gs = load_tu_dataset(PROTEINS_DIR, "PROTEINS")
    assert len(gs) == 1113 and gs.feature_dim == 3 and gs.num_classes == 2
    assert abs(gs.mean_nodes() - 39.1) < 0.1


def test_directed_degree_features_split_out_and_in():
    a = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=np.int8)
    g = Graph(0, np.zeros((3, 1)), a, directed=True)
    gs = with_degree_features(GraphSet([g], 1), 3)
    assert gs.feature_dim == 8
    f = gs.graphs[0].features
    assert np.argmax(f[:, :4], axis=1).tolist() == [2, 1, 0]  # out-degree
    assert np.argmax(f[:, 4:], axis=1).tolist() == [0, 1, 2]  # in-degree

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_volumes.dual_graph import (OPPOSITE, GraphError, build_hierarchy, edge_direction,
                                         full_grid_graph, level_split_labels, refine_graph,
                                         restrict_edges)
from adaptive_volumes.octree import build_octree
from oracles import pairwise_face_adjacency, random_points, rasterized_face_adjacency


def test_full_grid_counts():
    g = full_grid_graph(2)
    assert g.num_vertices == 64
    assert g.num_edges == 288
    assert set(g.edge_counts().values()) == {48}


def test_refining_full_grid_gives_next_full_grid():
    g2 = full_grid_graph(2)
    g3 = refine_graph(g2, np.ones(64, dtype=bool))
    ref = full_grid_graph(3)
    assert g3.vertex_set() == ref.vertex_set()
    assert g3.edge_set() == ref.edge_set()


def test_no_split_keeps_graph():
    g = full_grid_graph(3)
    g4 = refine_graph(g, np.zeros(g.num_vertices, dtype=bool))
    assert g4.level == 4
    assert g4.edge_set() == g.edge_set()


def test_refine_rejects_bad_labels():
    g = full_grid_graph(3)
    with pytest.raises(GraphError, match="inconsistent split labels"):
        refine_graph(g, np.ones(5, dtype=bool))


@pytest.mark.parametrize("seed", range(6))
def test_hierarchy_matches_pairwise_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    tree = build_octree(random_points(rng, n=int(rng.integers(10, 200))), int(rng.integers(4, 6)))
    for g in build_hierarchy(tree):
        leaves = tree.leaf_keys(g.level)
        assert g.vertex_set() == {tuple(map(int, k)) for k in leaves}
        assert g.edge_set() == pairwise_face_adjacency(leaves)


def test_oracles_agree():
    rng = np.random.default_rng(7)
    tree = build_octree(random_points(rng, n=150, kind="cluster"), 5)
    leaves = tree.leaf_keys()
    assert pairwise_face_adjacency(leaves) == rasterized_face_adjacency(leaves)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_edge_invariants(seed):
    rng = np.random.default_rng(seed)
    tree = build_octree(random_points(rng, n=int(rng.integers(5, 300))), 5)
    for g in build_hierarchy(tree):
        edges = g.edge_set()
        # every edge appears in both orientations with opposite direction codes
        assert all((j, i, int(OPPOSITE[c])) in edges for i, j, c in edges)
        assert not np.any(g.src == g.dst)
        # direction codes agree with the geometric offset
        centers, r = g.geometry()
        dp = centers[g.dst] - centers[g.src]
        for k in range(0, len(dp), max(1, len(dp) // 50)):
            assert edge_direction(dp[k]) == g.dir[k]
        # sorted by (dir, src, dst)
        order = np.lexsort((g.dst, g.src, g.dir))
        assert np.array_equal(order, np.arange(g.num_edges))


def test_edge_direction_rejects_diagonal():
    assert edge_direction([0.0, 0.0, -1.0]) == 5
    with pytest.raises(GraphError, match="non-face-adjacent"):
        edge_direction([1.0, 1.0, 0.0])


def test_level_split_labels_only_on_finest_vertices():
    tree = build_octree(random_points(np.random.default_rng(3), n=50), 5)
    for g in build_hierarchy(tree)[:-1]:
        s = level_split_labels(tree, g)
        assert not s[g.depths < g.level].any()
        assert s.sum() == tree.split[g.level].sum()


def test_restrict_edges_modes():
    tree = build_octree(random_points(np.random.default_rng(5), n=80, kind="cluster"), 5)
    g = build_hierarchy(tree)[-1]
    ds, dd = g.depths[g.src], g.depths[g.dst]
    cross = int(np.sum(ds != dd))
    assert cross > 0
    single = restrict_edges(g, "single_scale")
    f2c = restrict_edges(g, "fine_to_coarse")
    c2f = restrict_edges(g, "coarse_to_fine")
    assert restrict_edges(g, "full") is g
    assert single.num_edges == g.num_edges - cross
    assert f2c.num_edges - single.num_edges == int(np.sum(ds > dd))
    assert c2f.num_edges - single.num_edges == int(np.sum(ds < dd))
    assert np.all(single.depths[single.src] == single.depths[single.dst])
    with pytest.raises(GraphError):
        restrict_edges(g, "diagonal")

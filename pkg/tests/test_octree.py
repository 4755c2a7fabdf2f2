import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adaptive_volumes.octree import (Octree, OctreeError, PointSet, build_octree,
                                     build_octree_from_shape, input_features, key_codes,
                                     lookup_keys, morton_decode, morton_encode, node_geometry,
                                     sample_sdf_targets)
from adaptive_volumes.shapes import Sphere
from oracles import random_points, recursive_octree


def as_dict(tree):
    out = {}
    for d in range(tree.max_depth + 1):
        for k, s, e in zip(tree.keys[d], tree.split[d], tree.non_empty[d]):
            out[(int(k[0]), int(k[1]), int(k[2]), d)] = (not s, bool(e))
    return out


@given(st.lists(st.tuples(*[st.integers(0, 2 ** 16 - 1)] * 3), min_size=1, max_size=50))
def test_morton_roundtrip(coords):
    xyz = np.array(coords, dtype=np.int64)
    assert np.array_equal(morton_decode(morton_encode(xyz)), xyz)


def test_morton_bit_order():
    assert morton_encode(np.array([[1, 0, 0]]))[0] == 1
    assert morton_encode(np.array([[0, 1, 0]]))[0] == 2
    assert morton_encode(np.array([[0, 0, 1]]))[0] == 4


def test_node_geometry():
    c, r = node_geometry((3, 2, 1, 2))
    assert np.allclose(c, [0.375, 0.125, -0.125])
    assert r == 0.25


def test_single_point_depth4():
    tree = build_octree(np.array([[0.1, 0.2, 0.3]]), 4)
    assert len(tree.leaf_keys()) == 512 - 1 + 8
    assert tree.leaf_volume() == 1.0


def test_depth3_is_full_grid():
    tree = build_octree(np.array([[0.0, 0.0, 0.0]]), 3)
    assert len(tree.leaf_keys()) == 512
    assert tree.is_full_to(3)


def test_empty_input_rejected():
    with pytest.raises(OctreeError, match="no input points"):
        build_octree(np.zeros((0, 3)), 5)


def test_out_of_box_points_are_clamped_with_warning():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        tree = build_octree(np.array([[0.7, 0.0, 0.0], [0.0, 0.0, 0.0]]), 4)
    assert any("clamp" in str(x.message) for x in w)
    assert tree.leaf_volume() == 1.0


@pytest.mark.parametrize("seed", range(8))
def test_matches_recursive_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = random_points(rng, n=int(rng.integers(1, 300)))
    depth = int(rng.integers(3, 6))
    assert as_dict(build_octree(pts, depth)) == recursive_octree(pts, depth)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 6))
def test_leaves_tile_the_cube(seed, depth):
    rng = np.random.default_rng(seed)
    tree = build_octree(random_points(rng, n=int(rng.integers(1, 400))), depth)
    assert tree.leaf_volume() == 1.0
    # children come in groups of eight, in parent order
    for d in range(1, tree.max_depth + 1):
        parents = tree.keys[d - 1][tree.split[d - 1]]
        assert np.array_equal(tree.keys[d][::8] >> 1, parents)
    # keys sorted by Morton code at every depth
    for d in range(tree.max_depth + 1):
        codes = morton_encode(tree.keys[d])
        assert np.all(np.diff(codes) > 0)


def test_points_lie_in_non_empty_leaves():
    rng = np.random.default_rng(3)
    pts = random_points(rng, n=500, kind="cluster")
    tree = build_octree(pts, 5)
    leaves = tree.leaf_keys()
    D = tree.max_depth
    lat = np.clip(np.floor((pts + 0.5) * 2 ** D).astype(np.int64), 0, 2 ** D - 1)
    idx = lookup_keys(np.concatenate([lat, np.full((len(lat), 1), D)], 1), leaves)
    assert np.all(idx >= 0)


def test_from_splits_roundtrip():
    tree = build_octree(random_points(np.random.default_rng(1), n=200), 5)
    again = Octree.from_splits(tree.split, tree.non_empty)
    assert as_dict(again) == as_dict(tree)


def test_from_splits_rejects_bad_length():
    with pytest.raises(OctreeError, match="inconsistent split labels"):
        Octree.from_splits([np.ones(1, bool), np.ones(3, bool)])


def test_key_codes_unique_across_depths():
    tree = build_octree(random_points(np.random.default_rng(2), n=300), 5)
    keys = np.concatenate([tree.node_keys(d) for d in range(tree.max_depth + 1)])
    assert len(np.unique(key_codes(keys))) == len(keys)
    assert np.array_equal(lookup_keys(keys, keys), np.arange(len(keys)))
    assert lookup_keys(np.array([[0, 0, 0, 9]]), keys)[0] == -1


def test_nodes_table_links():
    tree = build_octree(random_points(np.random.default_rng(4), n=100), 5)
    keys, parent, child, is_leaf, _ = tree.nodes()
    assert parent[0] == -1
    for i in np.flatnonzero(parent >= 0)[:200]:
        assert np.array_equal(keys[i, :3] >> 1, keys[parent[i], :3])
        assert keys[i, 3] == keys[parent[i], 3] + 1
    assert np.all((child >= 0) == ~is_leaf)


def test_input_features_single_point():
    p = np.array([[0.01, 0.02, 0.03]])
    n = np.array([[0.0, 0.0, 2.0]])
    tree = build_octree(p, 4)
    feats, degenerate = input_features(tree, PointSet(p, n), return_degenerate=True)
    leaves = tree.leaf_keys()
    row = np.flatnonzero(np.abs(feats).sum(1) > 0)
    assert len(row) == 1 and not degenerate.any()
    c, r = node_geometry(leaves[row[0]])
    assert np.allclose(feats[row[0], :3], [0, 0, 1])
    assert np.isclose(feats[row[0], 3], (0.03 - c[2]) / r)


def test_input_features_cancelling_normals_are_degenerate():
    p = np.array([[0.01, 0.01, 0.01], [0.011, 0.01, 0.01]])
    n = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    tree = build_octree(p, 4)
    feats, degenerate = input_features(tree, PointSet(p, n), return_degenerate=True)
    assert degenerate.sum() == 1
    assert np.all(feats[degenerate] == 0)


def test_input_features_need_normals():
    tree = build_octree(np.zeros((1, 3)), 4)
    with pytest.raises(OctreeError):
        input_features(tree, PointSet(np.zeros((1, 3)), None))


def test_shape_octree_and_sdf_samples():
    sphere = Sphere(0.25)
    tree = build_octree_from_shape(sphere, 5)
    assert tree.leaf_volume() == 1.0
    x, g, dg = sample_sdf_targets(tree, sphere, 4, np.random.default_rng(0))
    assert len(x) == 4 * len(tree.leaf_keys())
    assert np.allclose(g, sphere(x))
    # finite-difference gradients of a sphere SDF are unit radial vectors
    far = np.linalg.norm(x, axis=1) > 0.05
    radial = x[far] / np.linalg.norm(x[far], axis=1, keepdims=True)
    assert np.allclose(dg[far], radial, atol=1e-2)

"""Linear octree over the unit cube [-0.5, 0.5]^3.

Nodes are stored per depth as integer lattice keys sorted by Morton code.
Children of the split nodes at depth ``d`` appear at depth ``d + 1`` in
groups of eight, in the same order as their parents, so parent/child links
are implicit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .shapes import sdf_gradient_fd

FULL_DEPTH = 3
MAX_SUPPORTED_DEPTH = 16

# child k has lattice offset (k & 1, (k >> 1) & 1, (k >> 2) & 1)
CHILD_OFFSETS = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)],
                         dtype=np.int64)


class OctreeError(ValueError):
    pass


def _spread_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64)
    out = np.zeros_like(v)
    for b in range(MAX_SUPPORTED_DEPTH + 1):
        out |= ((v >> np.uint64(b)) & np.uint64(1)) << np.uint64(3 * b)
    return out


def _compact_bits(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint64)
    out = np.zeros_like(v)
    for b in range(MAX_SUPPORTED_DEPTH + 1):
        out |= ((v >> np.uint64(3 * b)) & np.uint64(1)) << np.uint64(b)
    return out


def morton_encode(xyz: np.ndarray) -> np.ndarray:
    """Interleave lattice coordinates (x in the lowest bit) into Morton codes."""
    xyz = np.asarray(xyz, dtype=np.int64)
    code = (_spread_bits(xyz[..., 0]) | (_spread_bits(xyz[..., 1]) << np.uint64(1))
            | (_spread_bits(xyz[..., 2]) << np.uint64(2)))
    return code.astype(np.int64)


def morton_decode(code: np.ndarray) -> np.ndarray:
    code = np.asarray(code, dtype=np.int64).astype(np.uint64)
    return np.stack([_compact_bits(code), _compact_bits(code >> np.uint64(1)),
                     _compact_bits(code >> np.uint64(2))], axis=-1).astype(np.int64)


def key_codes(keys: np.ndarray) -> np.ndarray:
    """Unique integer per (x, y, z, d) key, valid across depths."""
    keys = np.asarray(keys, dtype=np.int64)
    return (morton_encode(keys[..., :3]) << 5) | keys[..., 3]


def lookup_keys(query: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of each query key in ``table`` (both (n, 4)), or -1 when absent."""
    tcodes = key_codes(table)
    order = np.argsort(tcodes, kind="stable")
    sorted_codes = tcodes[order]
    qcodes = key_codes(query)
    pos = np.searchsorted(sorted_codes, qcodes)
    pos = np.minimum(pos, len(sorted_codes) - 1)
    if len(sorted_codes) == 0:
        return np.full(len(qcodes), -1, dtype=np.int64)
    found = sorted_codes[pos] == qcodes
    return np.where(found, order[pos], -1)


def node_geometry(key) -> tuple[np.ndarray, float]:
    """Cell center and edge length of the node ``(x, y, z, d)``."""
    x, y, z, d = (int(v) for v in key)
    if d < 0 or not all(0 <= c < 2 ** d for c in (x, y, z)):
        raise OctreeError(f"invalid node key {tuple(key)}")
    r = 2.0 ** -d
    return -0.5 + r * (np.array([x, y, z], dtype=np.float64) + 0.5), r


def keys_geometry(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``node_geometry`` for an (n, 4) key array."""
    keys = np.asarray(keys)
    r = np.ldexp(1.0, -keys[:, 3].astype(np.int64))
    centers = -0.5 + r[:, None] * (keys[:, :3] + 0.5)
    return centers, r


@dataclass
class PointSet:
    positions: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.positions):
                raise ValueError("normals and positions differ in length")
            lengths = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > 1e-6):
                self.normals = self.normals / np.maximum(lengths, 1e-300)[:, None]

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True, eq=False)
class Octree:
    """Adaptive octree with per-depth key, split and occupancy arrays."""

    max_depth: int
    keys: tuple            # keys[d]: (n_d, 3) int64 lattice coords, Morton sorted
    split: tuple           # split[d]: (n_d,) bool
    non_empty: tuple       # non_empty[d]: (n_d,) bool
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_splits(cls, splits, non_empty=None) -> "Octree":
        """Grow the node arrays from per-depth split labels (depth 0 upward)."""
        keys = [np.zeros((1, 3), dtype=np.int64)]
        norm_splits = []
        for d, s in enumerate(splits):
            s = np.asarray(s, dtype=bool)
            if s.shape != (len(keys[d]),):
                raise OctreeError(
                    f"inconsistent split labels at depth {d}: "
                    f"{s.shape} vs {len(keys[d])} nodes")
            norm_splits.append(s)
            if not s.any():
                break
            parents = keys[d][s]
            keys.append((2 * parents[:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3))
        max_depth = len(keys) - 1
        while len(norm_splits) < len(keys):
            norm_splits.append(np.zeros(len(keys[len(norm_splits)]), dtype=bool))
        if non_empty is None:
            non_empty = [np.zeros(len(k), dtype=bool) for k in keys]
        else:
            non_empty = [np.asarray(n, dtype=bool) for n in non_empty][:len(keys)]
        return cls(max_depth, tuple(keys), tuple(norm_splits), tuple(non_empty))

    def num_nodes(self, depth=None) -> int:
        if depth is None:
            return sum(len(k) for k in self.keys)
        return len(self.keys[depth])

    def node_keys(self, depth: int) -> np.ndarray:
        k = self.keys[depth]
        return np.concatenate([k, np.full((len(k), 1), depth, dtype=np.int64)], axis=1)

    def leaf_keys(self, depth=None) -> np.ndarray:
        """Leaves of the subtree truncated at ``depth`` (default: full tree).

        Ordered by depth, then Morton code, which is the vertex order of the
        dual graph at that level.
        """
        depth = self.max_depth if depth is None else min(depth, self.max_depth)
        cached = self._cache.get(("leaves", depth))
        if cached is not None:
            return cached
        parts = []
        for d in range(depth + 1):
            k = self.node_keys(d)
            parts.append(k if d == depth else k[~self.split[d]])
        out = np.concatenate(parts, axis=0)
        self._cache[("leaves", depth)] = out
        return out

    def is_full_to(self, depth: int) -> bool:
        return all(len(self.keys[d]) == 8 ** d for d in range(min(depth, self.max_depth) + 1)) \
            and self.max_depth >= depth

    def parent_index(self, depth: int) -> np.ndarray:
        """Index at ``depth - 1`` of each node's parent."""
        split_idx = np.flatnonzero(self.split[depth - 1])
        return np.repeat(split_idx, 8)

    def child_start(self, depth: int) -> np.ndarray:
        """Index at ``depth + 1`` of each node's first child, -1 for leaves."""
        s = self.split[depth]
        rank = np.cumsum(s) - 1
        return np.where(s, 8 * rank, -1)

    def nodes(self):
        """Flat node table: (key (n, 4), parent (n,), first child (n,), is_leaf, non_empty).

        Indices refer to the flat, depth-major ordering; -1 marks a missing link.
        """
        offsets = np.cumsum([0] + [len(k) for k in self.keys])
        keys = np.concatenate([self.node_keys(d) for d in range(self.max_depth + 1)])
        parent = [np.array([-1])]
        child = []
        for d in range(self.max_depth + 1):
            if d > 0:
                parent.append(self.parent_index(d) + offsets[d - 1])
            cs = self.child_start(d)
            child.append(np.where(cs >= 0, cs + offsets[d + 1], -1))
        is_leaf = ~np.concatenate(self.split)
        return (keys, np.concatenate(parent), np.concatenate(child), is_leaf,
                np.concatenate(self.non_empty))

    def leaf_volume(self) -> float:
        keys = self.leaf_keys()
        return float(np.sum(np.ldexp(1.0, -3 * keys[:, 3].astype(np.int64))))


def points_to_lattice(positions: np.ndarray, depth: int) -> np.ndarray:
    res = 2 ** depth
    lat = np.floor((positions + 0.5) * res).astype(np.int64)
    return np.clip(lat, 0, res - 1)


def clamp_points(positions: np.ndarray) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64)
    outside = np.any((positions < -0.5) | (positions > 0.5), axis=1)
    n_out = int(outside.sum())
    if n_out:
        warnings.warn(f"{n_out} points outside the unit box were clamped", stacklevel=3)
        positions = np.clip(positions, -0.5, 0.5)
    return positions


def build_octree(points, max_depth: int) -> Octree:
    """Build the adaptive octree of a point cloud.

    The tree is full down to depth 3; below that a node is subdivided iff it
    contains at least one point, until ``max_depth``.
    """
    positions = points.positions if isinstance(points, PointSet) else np.asarray(points)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(positions) == 0:
        raise OctreeError("no input points")
    if not FULL_DEPTH <= max_depth <= MAX_SUPPORTED_DEPTH:
        raise OctreeError(f"max_depth must be in [{FULL_DEPTH}, {MAX_SUPPORTED_DEPTH}]")
    positions = clamp_points(positions)

    finest = points_to_lattice(positions, max_depth)
    splits, non_empty = [], []
    keys = np.zeros((1, 3), dtype=np.int64)
    for d in range(max_depth + 1):
        occupied = np.unique(morton_encode(finest >> (max_depth - d)))
        ne = np.isin(morton_encode(keys), occupied, assume_unique=False)
        if d == max_depth:
            s = np.zeros(len(keys), dtype=bool)
        elif d < FULL_DEPTH:
            s = np.ones(len(keys), dtype=bool)
        else:
            s = ne.copy()
        splits.append(s)
        non_empty.append(ne)
        keys = (2 * keys[s][:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)
    tree = Octree.from_splits(splits, non_empty)
    if tree.max_depth != max_depth:
        # only possible when max_depth == FULL_DEPTH
        raise OctreeError("octree construction lost its deepest level")
    return tree


def build_octree_from_shape(shape, max_depth: int) -> Octree:
    """Octree of the cells that may intersect the zero level set of an SDF.

    A cell is marked occupied when ``|sdf(center)|`` is at most its half
    diagonal, which is conservative for exact or under-estimating SDFs.
    """
    if not FULL_DEPTH <= max_depth <= MAX_SUPPORTED_DEPTH:
        raise OctreeError(f"max_depth must be in [{FULL_DEPTH}, {MAX_SUPPORTED_DEPTH}]")
    splits, non_empty = [], []
    keys = np.zeros((1, 3), dtype=np.int64)
    for d in range(max_depth + 1):
        k4 = np.concatenate([keys, np.full((len(keys), 1), d)], axis=1)
        centers, r = keys_geometry(k4)
        ne = np.abs(shape(centers)) <= 0.5 * np.sqrt(3.0) * r
        if d == max_depth:
            s = np.zeros(len(keys), dtype=bool)
        elif d < FULL_DEPTH:
            s = np.ones(len(keys), dtype=bool)
        else:
            s = ne.copy()
        splits.append(s)
        non_empty.append(ne)
        keys = (2 * keys[s][:, None, :] + CHILD_OFFSETS[None]).reshape(-1, 3)
    return Octree.from_splits(splits, non_empty)


def input_features(octree: Octree, points: PointSet, return_degenerate=False):
    """Four channels per leaf: averaged unit normal and the scaled normal offset.

    Only non-empty leaves at the maximum depth carry features; every other
    leaf is zero. Rows follow ``octree.leaf_keys()``.
    """
    if points.normals is None:
        raise OctreeError("input features need point normals")
    D = octree.max_depth
    leaves = octree.leaf_keys()
    feats = np.zeros((len(leaves), 4))
    degenerate = np.zeros(len(leaves), dtype=bool)

    positions = clamp_points(points.positions)
    lat = points_to_lattice(positions, D)
    lat4 = np.concatenate([lat, np.full((len(lat), 1), D)], axis=1)
    row = lookup_keys(lat4, leaves)
    if np.any(row < 0):
        raise OctreeError("points fall outside the octree's finest leaves")
    n = len(leaves)
    count = np.bincount(row, minlength=n).astype(np.float64)
    nsum = np.stack([np.bincount(row, points.normals[:, k], minlength=n) for k in range(3)], 1)
    psum = np.stack([np.bincount(row, positions[:, k], minlength=n) for k in range(3)], 1)

    has = count > 0
    centers, r = keys_geometry(leaves)
    norm = np.linalg.norm(nsum, axis=1)
    degenerate = has & (norm <= 1e-12 * np.maximum(count, 1))
    ok = has & ~degenerate
    unit = np.zeros_like(nsum)
    unit[ok] = nsum[ok] / norm[ok, None]
    centroid = np.zeros_like(psum)
    centroid[has] = psum[has] / count[has, None]
    offset = np.zeros(n)
    offset[ok] = np.einsum("ij,ij->i", centroid[ok] - centers[ok], unit[ok]) / r[ok]
    feats[:, :3] = unit
    feats[:, 3] = offset
    if return_degenerate:
        return feats, degenerate
    return feats


def sample_sdf_targets(octree: Octree, shape, samples_per_leaf: int,
                       rng: np.random.Generator):
    """Uniform samples in every leaf with SDF values and finite-difference gradients.

    The difference step is one sixteenth of the sample's cell size.
    """
    leaves = octree.leaf_keys()
    centers, r = keys_geometry(leaves)
    centers = np.repeat(centers, samples_per_leaf, axis=0)
    r = np.repeat(r, samples_per_leaf)
    x = centers + r[:, None] * rng.uniform(-0.5, 0.5, (len(r), 3))
    return x, shape(x), sdf_gradient_fd(shape, x, r / 16.0)

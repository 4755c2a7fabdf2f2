"""Multi-resolution dual graphs over octree leaves.

Vertices of the level-``k`` graph are the leaves of the octree truncated at
depth ``k``, ordered by (depth, Morton code). Edges connect face-adjacent
leaves and are stored directed, once per orientation, with a direction code
describing where the neighbor ``dst`` lies relative to ``src``:

    0 self, 1 -x, 2 +x, 3 -y, 4 +y, 5 -z, 6 +z
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .octree import CHILD_OFFSETS, FULL_DEPTH, Octree, keys_geometry, morton_decode, morton_encode

DIRECTION_NAMES = ("self", "-x", "+x", "-y", "+y", "-z", "+z")
OPPOSITE = np.array([0, 2, 1, 4, 3, 6, 5])
EDGE_MODES = ("full", "single_scale", "fine_to_coarse", "coarse_to_fine")

# unit lattice step for each direction code
DIRECTION_VECTORS = np.array([[0, 0, 0], [-1, 0, 0], [1, 0, 0], [0, -1, 0],
                              [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.int64)


class GraphError(ValueError):
    pass


def _face_children():
    # FACE_CHILDREN[axis, bit] -> the 4 child indices whose offset on axis == bit
    table = np.zeros((3, 2, 4), dtype=np.int64)
    for a in range(3):
        for bit in range(2):
            table[a, bit] = [k for k in range(8) if CHILD_OFFSETS[k, a] == bit]
    return table


FACE_CHILDREN = _face_children()


def _sibling_table():
    rows = []
    for k in range(8):
        for a in range(3):
            other = k ^ (1 << a)
            code = 2 * a + 2 if CHILD_OFFSETS[k, a] == 0 else 2 * a + 1
            rows.append((k, other, code))
    return np.array(rows, dtype=np.int64)


# (child, sibling, direction) for the 24 directed edges inside one parent
SIBLING_EDGES = _sibling_table()


@dataclass(frozen=True, eq=False)
class DualGraph:
    level: int
    keys: np.ndarray       # (N, 4) x, y, z, depth
    src: np.ndarray        # (E,)
    dst: np.ndarray        # (E,)
    dir: np.ndarray        # (E,) codes 1..6, edges sorted by (dir, src, dst)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self) -> int:
        return len(self.keys)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def depths(self) -> np.ndarray:
        return self.keys[:, 3]

    def geometry(self):
        if "geometry" not in self._cache:
            self._cache["geometry"] = keys_geometry(self.keys)
        return self._cache["geometry"]

    def bucket(self, code: int):
        lo, hi = np.searchsorted(self.dir, [code, code + 1])
        return self.src[lo:hi], self.dst[lo:hi]

    def edge_counts(self) -> dict:
        return {DIRECTION_NAMES[c]: int(np.sum(self.dir == c)) for c in range(1, 7)}

    def edge_set(self) -> set:
        """Edges as a set of (src key, dst key, dir) tuples, independent of vertex order."""
        k = [tuple(map(int, row)) for row in self.keys]
        return {(k[i], k[j], int(c)) for i, j, c in zip(self.src, self.dst, self.dir)}

    def vertex_set(self) -> set:
        return {tuple(map(int, row)) for row in self.keys}


def make_graph(level, keys, src, dst, dirs) -> DualGraph:
    src, dst, dirs = (np.asarray(a, dtype=np.int64) for a in (src, dst, dirs))
    order = np.lexsort((dst, src, dirs))
    return DualGraph(level, np.asarray(keys, dtype=np.int64), src[order], dst[order],
                     dirs[order])


def full_grid_graph(depth: int) -> DualGraph:
    """Dual graph of the uniform grid at ``depth`` (vertices in Morton order)."""
    n = 2 ** depth
    codes = np.arange(n ** 3, dtype=np.int64)
    xyz = morton_decode(codes)
    keys = np.concatenate([xyz, np.full((len(xyz), 1), depth)], axis=1)
    src, dst, dirs = [], [], []
    for c in range(1, 7):
        nb = xyz + DIRECTION_VECTORS[c]
        ok = np.all((nb >= 0) & (nb < n), axis=1)
        src.append(np.flatnonzero(ok))
        dst.append(morton_encode(nb[ok]))
        dirs.append(np.full(ok.sum(), c))
    return make_graph(depth, keys, np.concatenate(src), np.concatenate(dst),
                      np.concatenate(dirs))


def refine_graph(g: DualGraph, split) -> DualGraph:
    """Build the next-level graph by subdividing the vertices marked in ``split``.

    Split vertices are replaced by their eight children; edges touching them
    are redirected to the children on the shared face, and the 24 sibling
    edges of each subdivided node are added from a fixed table.
    """
    split = np.asarray(split, dtype=bool)
    if split.shape != (g.num_vertices,):
        raise GraphError("inconsistent split labels: wrong length")
    if np.any(split & (g.depths != g.level)):
        raise GraphError("inconsistent split labels: split on a childless node")

    n_keep = int(np.sum(~split))
    new_index = np.full(g.num_vertices, -1, dtype=np.int64)
    new_index[~split] = np.arange(n_keep)
    split_rank = np.full(g.num_vertices, -1, dtype=np.int64)
    split_rank[split] = np.arange(int(split.sum()))
    child_base = n_keep + 8 * split_rank

    parents = g.keys[split]
    child_xyz = (2 * parents[:, None, :3] + CHILD_OFFSETS[None]).reshape(-1, 3)
    child_keys = np.concatenate([child_xyz, np.full((len(child_xyz), 1), g.level + 1)], 1)
    keys = np.concatenate([g.keys[~split], child_keys], axis=0)

    src, dst, dirs = [], [], []
    s_split, d_split = split[g.src], split[g.dst]
    axis = (g.dir - 1) // 2
    positive = (g.dir % 2) == 0

    keep = ~s_split & ~d_split
    src.append(new_index[g.src[keep]])
    dst.append(new_index[g.dst[keep]])
    dirs.append(g.dir[keep])

    # only the neighbor is subdivided: connect to its 4 children on the shared face
    m = ~s_split & d_split
    face = FACE_CHILDREN[axis[m], (~positive[m]).astype(np.int64)]       # (m, 4)
    src.append(np.repeat(new_index[g.src[m]], 4))
    dst.append((child_base[g.dst[m]][:, None] + face).ravel())
    dirs.append(np.repeat(g.dir[m], 4))

    # only the source is subdivided: its 4 children on the face toward dst
    m = s_split & ~d_split
    face = FACE_CHILDREN[axis[m], positive[m].astype(np.int64)]
    src.append((child_base[g.src[m]][:, None] + face).ravel())
    dst.append(np.repeat(new_index[g.dst[m]], 4))
    dirs.append(np.repeat(g.dir[m], 4))

    # both subdivided (same size): children pair up across the face
    m = s_split & d_split
    fs = FACE_CHILDREN[axis[m], positive[m].astype(np.int64)]
    fd = FACE_CHILDREN[axis[m], (~positive[m]).astype(np.int64)]
    src.append((child_base[g.src[m]][:, None] + fs).ravel())
    dst.append((child_base[g.dst[m]][:, None] + fd).ravel())
    dirs.append(np.repeat(g.dir[m], 4))

    bases = child_base[split]
    src.append((bases[:, None] + SIBLING_EDGES[None, :, 0]).ravel())
    dst.append((bases[:, None] + SIBLING_EDGES[None, :, 1]).ravel())
    dirs.append(np.tile(SIBLING_EDGES[:, 2], len(bases)))

    return make_graph(g.level + 1, keys, np.concatenate(src), np.concatenate(dst),
                      np.concatenate(dirs))


def level_split_labels(octree: Octree, g: DualGraph) -> np.ndarray:
    """Split flags of the graph's vertices, read from the octree."""
    split = np.zeros(g.num_vertices, dtype=bool)
    if g.level < octree.max_depth:
        finest = np.flatnonzero(g.depths == g.level)
        split[finest] = octree.split[g.level]
    return split


def build_hierarchy(octree: Octree) -> list:
    """Dual graphs for levels 3..D of an octree that is full to depth 3."""
    if not octree.is_full_to(FULL_DEPTH):
        raise GraphError(f"octree must be full to depth {FULL_DEPTH}")
    graphs = [full_grid_graph(FULL_DEPTH)]
    for _ in range(FULL_DEPTH, octree.max_depth):
        g = graphs[-1]
        graphs.append(refine_graph(g, level_split_labels(octree, g)))
    return graphs


def edge_direction(dp) -> int:
    """Direction code of an axis-dominant offset vector."""
    dp = np.asarray(dp, dtype=np.float64)
    mag = np.abs(dp)
    a = int(np.argmax(mag))
    others = np.delete(mag, a)
    if not mag[a] > others.max():
        raise GraphError("non-face-adjacent pair")
    return 2 * a + (2 if dp[a] > 0 else 1)


def restrict_edges(g: DualGraph, mode: str) -> DualGraph:
    """Edge-set variants for ablations.

    ``single_scale`` drops every edge between different depths.
    ``fine_to_coarse`` also keeps edges whose source is deeper than the
    destination, i.e. fine vertices gather features from coarse neighbors.
    ``coarse_to_fine`` keeps the opposite orientation instead.
    """
    if mode not in EDGE_MODES:
        raise GraphError(f"unknown edge mode {mode!r}")
    if mode == "full":
        return g
    ds, dd = g.depths[g.src], g.depths[g.dst]
    keep = ds == dd
    if mode == "fine_to_coarse":
        keep |= ds > dd
    elif mode == "coarse_to_fine":
        keep |= ds < dd
    return DualGraph(g.level, g.keys, g.src[keep], g.dst[keep], g.dir[keep])

"""Neural multilevel partition of unity.

The field at ``x`` blends a shared one-hidden-layer MLP evaluated on every
leaf whose support covers ``x``:

    F(x) = sum_i c_i w_i(x) phi(x_loc, F_i) / sum_i c_i w_i(x)

with ``c_i = r_i^-3``, ``x_loc = (x - o_i) / r_i`` and a tensor-product
linear B-spline weight of half-width ``r_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as T
from .dual_graph import DualGraph
from .graph_nn import LevelFeatures
from .octree import key_codes

HIDDEN = 32
DEGENERATE_DENOM = 1e-12


@dataclass
class MpuHead:
    W1: T.Tensor   # (3 + C, H); first three rows act on local coordinates
    b1: T.Tensor   # (H,)
    W2: T.Tensor   # (H, 1)
    b2: T.Tensor   # (1,)


def bspline(t):
    t = np.abs(np.asarray(t, dtype=np.float64))
    return np.where(t < 1.0, 1.0 - t, 0.0)


def bspline_deriv(t):
    t = np.asarray(t, dtype=np.float64)
    return np.where(np.abs(t) < 1.0, -np.sign(t), 0.0)


def blend_weight(x, center, size):
    """Tensor-product B-spline weight of a node at (center, size)."""
    t = (np.asarray(x, dtype=np.float64) - np.asarray(center)) / size
    return np.prod(bspline(t), axis=-1)


@dataclass
class CoverPairs:
    """(point, leaf) pairs with positive weight and their blending coefficients."""
    point: np.ndarray      # (P,)
    leaf: np.ndarray       # (P,)
    local: np.ndarray      # (P, 3) local coordinates in (-1, 1)
    inv_size: np.ndarray   # (P,)
    coef: np.ndarray       # (P,)   c_i w_i / S
    dcoef: np.ndarray      # (P, 3) d(c_i w_i / S) / dx
    n_points: int
    fallbacks: int


def _leaf_table(graph: DualGraph):
    table = graph._cache.get("mpu_table")
    if table is None:
        codes = key_codes(graph.keys)
        order = np.argsort(codes)
        table = graph._cache["mpu_table"] = (codes[order], order,
                                             np.unique(graph.depths))
    return table


def _lookup(graph, keys):
    codes_sorted, order, _ = _leaf_table(graph)
    q = key_codes(keys)
    pos = np.minimum(np.searchsorted(codes_sorted, q), len(codes_sorted) - 1)
    return np.where(codes_sorted[pos] == q, order[pos], -1)


def _containing_leaf(graph, x):
    _, _, depths = _leaf_table(graph)
    found = np.full(len(x), -1, dtype=np.int64)
    for d in depths:
        n = 2 ** int(d)
        lat = np.clip(np.floor((x + 0.5) * n).astype(np.int64), 0, n - 1)
        keys = np.concatenate([lat, np.full((len(x), 1), d)], axis=1)
        hit = _lookup(graph, keys)
        found = np.where(found < 0, hit, found)
    return found


def covering_pairs(graph: DualGraph, x: np.ndarray) -> CoverPairs:
    """Range search: every leaf whose open support cube contains each point.

    Per depth, only the 2x2x2 lattice cells whose centers lie within one cell
    size of ``x`` can cover it.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    _, _, depths = _leaf_table(graph)
    corner = np.array([[k & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)])
    pts, leaves = [], []
    for d in depths:
        res = 2 ** int(d)
        u = (x + 0.5) * res - 0.5
        base = np.floor(u).astype(np.int64)
        cand = base[:, None, :] + corner[None]                        # (n, 8, 3)
        ok = np.all((cand >= 0) & (cand < res), axis=2)
        pi, ci = np.nonzero(ok)
        keys = np.concatenate([cand[pi, ci], np.full((len(pi), 1), d)], axis=1)
        hit = _lookup(graph, keys)
        pts.append(pi[hit >= 0])
        leaves.append(hit[hit >= 0])
    point = np.concatenate(pts)
    leaf = np.concatenate(leaves)

    centers, size = graph.geometry()
    t = (x[point] - centers[leaf]) / size[leaf][:, None]
    b = bspline(t)
    db = bspline_deriv(t)
    w = b.prod(axis=1)
    keep = w > 0
    point, leaf, t, b, db, w = point[keep], leaf[keep], t[keep], b[keep], db[keep], w[keep]

    inv = 1.0 / size[leaf]
    c = inv ** 3
    # d w / d x_k = B'(t_k) / r * prod_{l != k} B(t_l)
    grad_w = np.stack([db[:, 0] * b[:, 1] * b[:, 2], b[:, 0] * db[:, 1] * b[:, 2],
                       b[:, 0] * b[:, 1] * db[:, 2]], axis=1) * inv[:, None]
    S = np.bincount(point, c * w, minlength=n)
    dS = np.stack([np.bincount(point, c * grad_w[:, k], minlength=n) for k in range(3)], 1)

    fallbacks = 0
    bad = S < DEGENERATE_DENOM
    if np.any(bad):
        # measure-zero event: use the containing leaf alone
        fallbacks = int(bad.sum())
        drop = bad[point]
        point, leaf, t = point[~drop], leaf[~drop], t[~drop]
        c, w, grad_w, inv = c[~drop], w[~drop], grad_w[~drop], inv[~drop]
        extra_pt = np.flatnonzero(bad)
        extra_leaf = _containing_leaf(graph, x[extra_pt])
        et = (x[extra_pt] - centers[extra_leaf]) / size[extra_leaf][:, None]
        point = np.concatenate([point, extra_pt])
        leaf = np.concatenate([leaf, extra_leaf])
        t = np.concatenate([t, et])
        inv = np.concatenate([inv, 1.0 / size[extra_leaf]])
        c = np.concatenate([c, np.ones(len(extra_pt))])
        w = np.concatenate([w, np.ones(len(extra_pt))])
        grad_w = np.concatenate([grad_w, np.zeros((len(extra_pt), 3))])
        S = S.copy()
        dS = dS.copy()
        S[bad] = 1.0
        dS[bad] = 0.0

    Sp = S[point]
    coef = c * w / Sp
    dcoef = c[:, None] * grad_w / Sp[:, None] - (c * w / Sp ** 2)[:, None] * dS[point]
    return CoverPairs(point, leaf, t, inv, coef, dcoef, n, fallbacks)


def subset_pairs(pairs: CoverPairs, ids) -> CoverPairs:
    """Restrict precomputed pairs to the points ``ids``, renumbered in that order."""
    ids = np.asarray(ids, dtype=np.int64)
    remap = np.full(pairs.n_points, -1, dtype=np.int64)
    remap[ids] = np.arange(len(ids))
    keep = remap[pairs.point] >= 0
    return CoverPairs(remap[pairs.point[keep]], pairs.leaf[keep], pairs.local[keep],
                      pairs.inv_size[keep], pairs.coef[keep], pairs.dcoef[keep], len(ids),
                      pairs.fallbacks)


def head_forward(head: MpuHead, local: np.ndarray, feats: T.Tensor, grad: bool):
    """phi per pair and, optionally, its gradient w.r.t. the local coordinates."""
    inp = T.concat([T.const(local), feats], axis=1)
    h = T.add_bias(T.matmul(inp, head.W1), head.b1)
    a = T.relu(h)
    phi = T.add_bias(T.matmul(a, head.W2), head.b2)
    if not grad:
        return phi, None
    mask = (h.value > 0).astype(np.float64)
    ones = T.const(np.ones((len(local), 1)))
    rows = T.mul_const(T.matmul(ones, T.transpose(head.W2)), mask)     # (P, H)
    w1x = T.take(head.W1, rows=slice(0, 3))                             # (3, H)
    return phi, T.matmul(rows, T.transpose(w1x))                        # (P, 3)


def field_at_level(level: LevelFeatures, head: MpuHead, x: np.ndarray, grad=False,
                   pairs: CoverPairs | None = None):
    """Field values (n, 1) and optionally spatial gradients (n, 3) as tape tensors."""
    if pairs is None:
        pairs = covering_pairs(level.graph, x)
    feats = T.gather_rows(level.F, T.Index(pairs.leaf, level.F.shape[0]))
    phi, dphi = head_forward(head, pairs.local, feats, grad)
    scatter = T.Index(pairs.point, pairs.n_points)
    value = T.scatter_sum(T.mul_const(phi, pairs.coef[:, None]), scatter)
    if not grad:
        return value, None
    phi3 = T.concat([phi, phi, phi], axis=1)
    term = T.add(T.mul_const(phi3, pairs.dcoef),
                 T.mul_const(dphi, (pairs.coef * pairs.inv_size)[:, None] * np.ones((1, 3))))
    return value, T.scatter_sum(term, scatter)


def eval_field(levels, heads, points, level=None, grad=False):
    """Evaluate the field of one decoder level (deepest by default).

    ``levels`` and ``heads`` are dicts keyed by depth.
    """
    depth = max(levels) if level is None else level
    if depth not in levels:
        raise KeyError(f"no decoder level at depth {depth}")
    return field_at_level(levels[depth], heads[depth], points, grad=grad)


def eval_field_numpy(level: LevelFeatures, head: MpuHead, x, batch=65536) -> np.ndarray:
    """Tape-free batched evaluation for grids and queries."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(x))
    F = level.F.value
    W1, b1, W2, b2 = (head.W1.value, head.b1.value.reshape(1, -1),
                      head.W2.value, head.b2.value.reshape(1, -1))
    for lo in range(0, len(x), batch):
        p = covering_pairs(level.graph, x[lo:lo + batch])
        h = np.maximum(np.concatenate([p.local, F[p.leaf]], axis=1) @ W1 + b1, 0.0)
        phi = (h @ W2 + b2)[:, 0]
        out[lo:lo + batch] = np.bincount(p.point, p.coef * phi, minlength=p.n_points)
    return out
